// Command line front end: gen-data, train, eval, gradcheck, ablate, and
// dump-prompt-maps, all driven by a JSON run config.

#include <cstdio>
#include <exception>
#include <string>

#include "CLI11.hpp"
#include "qadapt/io.hpp"

int main(int argc, char** argv) {
    CLI::App app{"desk-scale multimodal IQA model with progressive instruction tuning"};
    app.require_subcommand(1);

    std::string config, out, ckpt, strategy, metrics_out;
    std::string grid = "table5";
    long long seed = -1;
    std::size_t n_seeds = 5;
    std::size_t samples = 8;

    CLI::App* gen = app.add_subcommand("gen-data", "write the training stream as JSON lines");
    gen->add_option("--config", config, "run config JSON")->required();
    gen->add_option("--out", out, "output directory")->required();

    CLI::App* train = app.add_subcommand("train", "run a tuning strategy, write checkpoints");
    train->add_option("--config", config, "run config JSON")->required();
    train->add_option("--strategy", strategy, "builtin strategy name (default: from config)");
    train->add_option("--seed", seed, "training seed (default: first config seed)");
    train->add_option("--out", out, "output directory (default: from config)");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    eval->add_option("--ckpt", ckpt, "checkpoint path")->required();
    eval->add_option("--config", config, "optional config overriding evaluation set sizes");
    eval->add_option("--metrics-out", metrics_out, "append the report row to this CSV");

    CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient check per group");
    gc->add_option("--config", config, "run config JSON")->required();

    CLI::App* ab = app.add_subcommand("ablate", "run an ablation grid over variants and seeds");
    ab->add_option("--config", config, "run config JSON")->required();
    ab->add_option("--grid", grid, "grid name (table5)");
    ab->add_option("--seeds", n_seeds, "number of seeds per variant");
    ab->add_option("--out", out, "output directory (default: from config)");

    CLI::App* dump =
        app.add_subcommand("dump-prompt-maps", "write feature and modulation maps as PGM");
    dump->add_option("--ckpt", ckpt, "checkpoint path")->required();
    dump->add_option("--samples", samples, "number of eval samples to dump");
    dump->add_option("--out", out, "output directory")->required();

    CLI11_PARSE(app, argc, argv);
    try {
        if (gen->parsed()) return qadapt::cmd_gen_data(config, out);
        if (train->parsed()) return qadapt::cmd_train(config, strategy, seed, out);
        if (eval->parsed()) return qadapt::cmd_eval(ckpt, config, metrics_out);
        if (gc->parsed()) return qadapt::cmd_gradcheck(config);
        if (ab->parsed()) return qadapt::cmd_ablate(config, grid, n_seeds, out);
        if (dump->parsed()) return qadapt::cmd_dump_prompt_maps(ckpt, samples, out);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
