#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "qadapt/io.hpp"

using namespace qadapt;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.height = 8;
    c.patch = 4;
    c.d_v = 8;
    c.d_t = 8;
    c.d = 8;
    c.heads = 2;
    c.encoder_depth = 1;
    c.decoder_depth = 1;
    c.generator_depth = 1;
    c.vocab = 60;
    c.max_context = 48;
    c.queries = 2;
    c.m_t_max = 18;
    c.rank = 2;
    c.alpha = 4.0;
    return c;
}

DataConfig micro_data() {
    DataConfig dc;
    dc.height = 8;
    dc.train = 12;
    dc.eval_mcq = 4;
    dc.eval_expl = 4;
    dc.eval_yesno = 4;
    dc.eval_how = 4;
    return dc;
}

RunConfig tiny_run() {
    RunConfig c;
    c.model = tiny_config();
    c.data = micro_data();
    c.epochs_multiplier = 1;
    return c;
}

// Fresh scratch directory per test run; paths below stay inside it.
std::string scratch_dir() {
    const std::string dir =
        (std::filesystem::temp_directory_path() / "qadapt_io_test").string();
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::uint32_t u32_at(const std::string& bytes, std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i)
        v = (v << 8) | static_cast<std::uint8_t>(bytes[off + static_cast<std::size_t>(i)]);
    return v;
}

// Byte offset of the first tensor's dtype tag, walked from the header.
std::size_t first_dtype_offset(const std::string& bytes) {
    std::size_t off = 12;  // magic, version, tensor count
    const std::uint32_t name_len = u32_at(bytes, off);
    off += 4 + name_len;
    const std::uint32_t ndim = u32_at(bytes, off);
    off += 4 + 4 * static_cast<std::size_t>(ndim);
    return off;
}

}  // namespace

// ---------------------------------------------------------------------------
// run configuration JSON

TEST_CASE("run config: serialize then parse is the identity on the text") {
    RunConfig c = tiny_run();
    c.strategy = "two-stage";
    c.seeds = {3, 9, 27};
    c.lr = 0.5;
    c.warmup_ratio = 0.125;
    c.continue_connector = false;
    c.out_dir = "elsewhere";
    const std::string text = serialize_run_config(c);
    const RunConfig back = parse_run_config(text);
    CHECK(serialize_run_config(back) == text);
    CHECK(back.strategy == "two-stage");
    CHECK(back.seeds == std::vector<std::uint64_t>{3, 9, 27});
    CHECK(back.lr == 0.5);
    CHECK(back.continue_connector == false);
    CHECK(back.model.d == 8);
    CHECK(back.data.train == 12);
    CHECK(back.data.height == 8);
}

TEST_CASE("run config: omitted fields take defaults, data height follows the model") {
    const RunConfig c = parse_run_config("{\"model\": {\"height\": 8, \"patch\": 4}}");
    CHECK(c.strategy == "progressive");
    CHECK(c.seeds == std::vector<std::uint64_t>{1});
    CHECK(c.batch_size == 4);
    CHECK(c.epochs_multiplier == 3);
    CHECK(c.data.height == 8);   // mirrors model.height when unset
    CHECK(c.data.train == 2000);
}

TEST_CASE("run config: unknown keys are rejected with the offending name") {
    CHECK_THROWS_WITH_AS(parse_run_config("{\"learning_rate\": 0.1}"),
                         "unknown config field: learning_rate", config_error);
    CHECK_THROWS_WITH_AS(parse_run_config("{\"model\": {\"width\": 3}}"),
                         "unknown config field: model.width", config_error);
    CHECK_THROWS_WITH_AS(parse_run_config("{\"data\": {\"n_train\": 3}}"),
                         "unknown config field: data.n_train", config_error);
}

TEST_CASE("run config: wrong value types name the field") {
    CHECK_THROWS_WITH_AS(parse_run_config("{\"model\": {\"d\": \"wide\"}}"),
                         "config field must be a non-negative integer: model.d", config_error);
    CHECK_THROWS_WITH_AS(parse_run_config("{\"lr\": \"fast\"}"),
                         "config field must be a number: lr", config_error);
    CHECK_THROWS_WITH_AS(parse_run_config("{\"continue_connector\": 1}"),
                         "config field must be a boolean: continue_connector", config_error);
    CHECK_THROWS_WITH_AS(parse_run_config("{\"out_dir\": 7}"),
                         "config field must be a string: out_dir", config_error);
    CHECK_THROWS_WITH_AS(parse_run_config("{\"seeds\": 5}"),
                         "config field must be an array: seeds", config_error);
    CHECK_THROWS_AS(parse_run_config("{\"seeds\": [-1]}"), config_error);
    CHECK_THROWS_AS(parse_run_config("[1,2]"), config_error);
    CHECK_THROWS_AS(parse_run_config("not json"), config_error);
}

TEST_CASE("run config: validation rejects inconsistent settings") {
    RunConfig c = tiny_run();
    c.model.vocab = 61;
    CHECK_THROWS_AS(c.validate(), config_error);

    c = tiny_run();
    c.strategy = "mystery";
    CHECK_THROWS_AS(c.validate(), config_error);

    c = tiny_run();
    c.seeds.clear();
    CHECK_THROWS_AS(c.validate(), config_error);

    c = tiny_run();
    c.data.fraction = 1.5;
    CHECK_THROWS_AS(c.validate(), config_error);

    c = tiny_run();
    c.data.height = 16;  // disagrees with model.height 8
    CHECK_THROWS_AS(c.validate(), config_error);

    c = tiny_run();
    c.warmup_ratio = -0.1;
    CHECK_THROWS_AS(c.validate(), config_error);
}

// ---------------------------------------------------------------------------
// checkpoint format

TEST_CASE("checkpoint: save, load, rebuild reproduces every parameter at f32") {
    const RunConfig cfg = tiny_run();
    QAdaptModel model = QAdaptModel::make(cfg.model, 5, true);
    model.attach_vision_lora(7);
    model.attach_llm_lora(8);

    const std::string bytes = checkpoint_bytes(model, cfg, 1);
    const LoadedCheckpoint ck = parse_checkpoint(bytes);
    CHECK(ck.version == 1);
    CHECK(ck.stage == 1);
    CHECK(ck.tensors.size() == model.store.entries().size());
    CHECK(serialize_run_config(ck.config) == serialize_run_config(cfg));

    QAdaptModel back = model_from_checkpoint(ck);
    CHECK(back.has_prompt());
    for (const ParameterStore::Entry& e : model.store.entries()) {
        const Tensor& b = back.store.get(e.name);
        REQUIRE(b.dims() == e.tensor.dims());
        const std::vector<double>& want = e.tensor.data();
        const std::vector<double>& got = b.data();
        for (std::size_t i = 0; i < want.size(); ++i) {
            // disk precision is f32; the cast is the exact expected value
            CHECK(got[i] == static_cast<double>(static_cast<float>(want[i])));
        }
    }

    // one cast reaches the f32 fixed point: a second save is byte-identical
    CHECK(checkpoint_bytes(back, cfg, 1) == bytes);
}

TEST_CASE("checkpoint: adapters and prompt module reattach only when present") {
    const RunConfig cfg = tiny_run();
    const QAdaptModel plain = QAdaptModel::make(cfg.model, 5, false);
    const QAdaptModel back = model_from_checkpoint(parse_checkpoint(checkpoint_bytes(plain, cfg, 0)));
    CHECK(!back.has_prompt());
    for (const ParameterStore::Entry& e : back.store.entries())
        CHECK(e.name.find(".lora.") == std::string::npos);
}

TEST_CASE("checkpoint: corrupt headers fail with typed errors") {
    const RunConfig cfg = tiny_run();
    const QAdaptModel model = QAdaptModel::make(cfg.model, 5, false);
    const std::string bytes = checkpoint_bytes(model, cfg, 0);

    std::string magic = bytes;
    magic[0] = 'X';
    CHECK_THROWS_WITH_AS(parse_checkpoint(magic), "not a checkpoint: magic bytes are not QADP",
                         version_error);

    std::string ver = bytes;
    ver[4] = 9;
    CHECK_THROWS_WITH_AS(parse_checkpoint(ver), "unsupported checkpoint version 9", version_error);

    std::string dtype = bytes;
    dtype[first_dtype_offset(bytes)] = 2;
    CHECK_THROWS_AS(parse_checkpoint(dtype), version_error);
    try {
        parse_checkpoint(dtype);
    } catch (const version_error& e) {
        const std::string what = e.what();
        CHECK(what.find("dtype tag 2") != std::string::npos);
        CHECK(what.find("offset") != std::string::npos);
    }

    CHECK_THROWS_AS(parse_checkpoint(bytes + "xx"), data_error);
    try {
        parse_checkpoint(bytes + "xx");
    } catch (const data_error& e) {
        CHECK(std::string(e.what()).find("2 trailing bytes") != std::string::npos);
    }
}

TEST_CASE("checkpoint: every truncation point reports the failing offset") {
    const RunConfig cfg = tiny_run();
    const QAdaptModel model = QAdaptModel::make(cfg.model, 5, false);
    const std::string bytes = checkpoint_bytes(model, cfg, 0);

    // representative cuts: mid-magic, mid-header, mid-payload, mid-trailer
    for (const std::size_t keep :
         {std::size_t{2}, std::size_t{9}, std::size_t{40}, bytes.size() / 2, bytes.size() - 3}) {
        const std::string cut = bytes.substr(0, keep);
        CHECK_THROWS_AS(parse_checkpoint(cut), std::runtime_error);
        try {
            parse_checkpoint(cut);
        } catch (const version_error&) {
            CHECK(keep < 4);  // only a cut magic downgrades to a version error
        } catch (const data_error& e) {
            const std::string what = e.what();
            CHECK(what.find("truncated at byte " + std::to_string(keep)) != std::string::npos);
            CHECK(what.find("offset") != std::string::npos);
        }
    }
}

TEST_CASE("checkpoint: tensor table must match the rebuilt model exactly") {
    const RunConfig cfg = tiny_run();
    const QAdaptModel model = QAdaptModel::make(cfg.model, 5, false);
    const LoadedCheckpoint good = parse_checkpoint(checkpoint_bytes(model, cfg, 0));

    LoadedCheckpoint renamed = good;
    renamed.tensors[0].first = "encoder.mystery";
    CHECK_THROWS_WITH_AS(model_from_checkpoint(renamed),
                         "checkpoint tensor not in model: encoder.mystery", data_error);

    LoadedCheckpoint missing = good;
    missing.tensors.pop_back();
    CHECK_THROWS_AS(model_from_checkpoint(missing), data_error);

    LoadedCheckpoint reshaped = good;
    reshaped.tensors[0].second = Tensor::zeros({1, 1});
    CHECK_THROWS_AS(model_from_checkpoint(reshaped), shape_error);
}

TEST_CASE("checkpoint: file round trip through disk") {
    const std::string dir = scratch_dir();
    const RunConfig cfg = tiny_run();
    const QAdaptModel model = QAdaptModel::make(cfg.model, 5, true);
    save_checkpoint(dir + "/m.ckpt", model, cfg, 2);
    const LoadedCheckpoint ck = load_checkpoint(dir + "/m.ckpt");
    CHECK(ck.stage == 2);
    CHECK(checkpoint_bytes(model_from_checkpoint(ck), cfg, 2) ==
          checkpoint_bytes(model, cfg, 2));
    CHECK_THROWS_AS(load_checkpoint(dir + "/absent.ckpt"), data_error);
}

// ---------------------------------------------------------------------------
// CSV and PGM writers

TEST_CASE("train csv: golden bytes for hand-built step records") {
    TrainReport r;
    r.steps.push_back({0, 0, 0.5, 1.25});
    r.steps.push_back({1, 3, 0.0625, -2.0});
    CHECK(train_csv_text(r) ==
          "stage,step,lr,loss\n"
          "0,0,0.5,1.25\n"
          "1,3,0.0625,-2\n");
}

TEST_CASE("metrics csv: golden bytes for a hand-built report") {
    EvalReport r;
    r.strategy = "joint";
    r.seed = 7;
    r.acc_mcq = 0.25;
    r.acc_yesno = 0.5;
    r.acc_howwhat = 0.75;
    r.srocc = -0.125;
    r.plcc = 1.0;
    r.expl_ppl = 2.5;
    r.dropped = 3;
    CHECK(metrics_csv_header() ==
          "strategy,seed,acc_mcq,acc_yesno,acc_howwhat,srocc,plcc,expl_ppl,dropped\n");
    CHECK(metrics_csv_row(r) == "joint,7,0.25,0.5,0.75,-0.125,1,2.5,3\n");
}

TEST_CASE("format_g17 preserves doubles through a text round trip") {
    for (const double v : {0.1, 1.0 / 3.0, 1e-300, -6.02e23, 0.0, 123456789.123456789}) {
        CHECK(std::strtod(format_g17(v).c_str(), nullptr) == v);
    }
}

TEST_CASE("metrics csv: the header is written once and rows append") {
    const std::string dir = scratch_dir();
    const std::string path = dir + "/metrics.csv";
    EvalReport r;
    r.strategy = "joint";
    r.seed = 1;
    append_metrics_row(path, r);
    r.seed = 2;
    append_metrics_row(path, r);
    const std::string text = read_file(path);
    CHECK(text == metrics_csv_header() + "joint,1,0,0,0,0,0,0,0\n" + "joint,2,0,0,0,0,0,0,0\n");
}

TEST_CASE("pgm: header, scaling, and clamping") {
    const Tensor map = Tensor::from_data({2, 3}, {0.0, 0.5, 1.0, -0.2, 1.2, 0.2});
    const std::string bytes = pgm_bytes(map);
    std::string want = "P5\n3 2\n255\n";
    for (const int q : {0, 128, 255, 0, 255, 51})
        want.push_back(static_cast<char>(static_cast<unsigned char>(q)));
    CHECK(bytes == want);
    CHECK_THROWS_AS(pgm_bytes(Tensor::zeros({4})), shape_error);

    const std::string dir = scratch_dir();
    write_pgm(dir + "/map.pgm", map);
    CHECK(read_file(dir + "/map.pgm") == want);
}

// ---------------------------------------------------------------------------
// subcommands

TEST_CASE("gen-data: deterministic jsonl with one line per training sample") {
    const std::string dir = scratch_dir();
    RunConfig cfg = tiny_run();
    write_file(dir + "/config.json", serialize_run_config(cfg));

    CHECK(cmd_gen_data(dir + "/config.json", dir + "/a") == 0);
    CHECK(cmd_gen_data(dir + "/config.json", dir + "/b") == 0);
    const std::string a = read_file(dir + "/a/train.jsonl");
    CHECK(a == read_file(dir + "/b/train.jsonl"));

    std::size_t lines = 0;
    for (const char ch : a) lines += ch == '\n';
    CHECK(lines == cfg.data.train);

    // spot-check one line: valid JSON carrying the expected fields
    const nlohmann::json first = nlohmann::json::parse(a.substr(0, a.find('\n')));
    CHECK(first.at("seed") == cfg.data.data_seed);
    CHECK(first.at("index") == 0);
    CHECK((first.at("task") == "explanation" || first.at("task") == "answering"));
    CHECK(first.at("severities").size() == 4);
    CHECK(first.at("instruction_ids").is_array());
    CHECK(first.at("target_ids").is_array());
    CHECK(first.at("gold").is_number_integer());
}

TEST_CASE("gen-data: fraction zero yields an explanation-only stream") {
    const std::string dir = scratch_dir();
    RunConfig cfg = tiny_run();
    cfg.data.fraction = 0.0;
    write_file(dir + "/config.json", serialize_run_config(cfg));
    CHECK(cmd_gen_data(dir + "/config.json", dir + "/out") == 0);
    std::ifstream f(dir + "/out/train.jsonl");
    std::string line;
    std::size_t n = 0;
    while (std::getline(f, line)) {
        const nlohmann::json j = nlohmann::json::parse(line);
        CHECK(j.at("task") == "explanation");
        ++n;
    }
    CHECK(n == cfg.data.train);
}

TEST_CASE("train: one stage checkpoint per stage plus csv outputs") {
    const std::string dir = scratch_dir();
    RunConfig cfg = tiny_run();
    cfg.seeds = {3};
    write_file(dir + "/config.json", serialize_run_config(cfg));

    CHECK(cmd_train(dir + "/config.json", "progressive", -1, dir + "/prog") == 0);
    CHECK(std::filesystem::exists(dir + "/prog/stage0.ckpt"));
    CHECK(std::filesystem::exists(dir + "/prog/stage1.ckpt"));
    CHECK(!std::filesystem::exists(dir + "/prog/stage2.ckpt"));

    CHECK(cmd_train(dir + "/config.json", "joint", -1, dir + "/joint") == 0);
    CHECK(std::filesystem::exists(dir + "/joint/stage0.ckpt"));
    CHECK(!std::filesystem::exists(dir + "/joint/stage1.ckpt"));

    const std::string train_csv = read_file(dir + "/prog/train.csv");
    CHECK(train_csv.rfind("stage,step,lr,loss\n", 0) == 0);
    CHECK(train_csv.find("\n1,") != std::string::npos);  // stage 1 steps present

    const std::string metrics = read_file(dir + "/prog/metrics.csv");
    CHECK(metrics.rfind(metrics_csv_header(), 0) == 0);
    CHECK(metrics.find("progressive,3,") != std::string::npos);

    // the stage checkpoint remembers which run produced it
    const LoadedCheckpoint ck = load_checkpoint(dir + "/prog/stage1.ckpt");
    CHECK(ck.stage == 1);
    CHECK(ck.config.strategy == "progressive");
    CHECK(ck.config.seeds == std::vector<std::uint64_t>{3});
}

TEST_CASE("eval: a reloaded stage checkpoint scores exactly like the model it stores") {
    const std::string dir = scratch_dir();
    RunConfig cfg = tiny_run();
    cfg.seeds = {4};
    write_file(dir + "/config.json", serialize_run_config(cfg));
    CHECK(cmd_train(dir + "/config.json", "joint", -1, dir + "/run") == 0);

    // reference: evaluate the f32-reloaded weights in process
    const LoadedCheckpoint ck = load_checkpoint(dir + "/run/stage0.ckpt");
    QAdaptModel model = model_from_checkpoint(ck);
    const EvalReport want = evaluate(model, Dataset(ck.config.data), false, "joint", 4);

    CHECK(cmd_eval(dir + "/run/stage0.ckpt", "", dir + "/eval.csv") == 0);
    CHECK(read_file(dir + "/eval.csv") == metrics_csv_header() + metrics_csv_row(want));

    // a second reload changes nothing: f32 storage is already a fixed point
    CHECK(cmd_eval(dir + "/run/stage0.ckpt", "", dir + "/eval2.csv") == 0);
    CHECK(read_file(dir + "/eval2.csv") == read_file(dir + "/eval.csv"));
}

TEST_CASE("eval: a config file that disagrees with the checkpoint is refused") {
    const std::string dir = scratch_dir();
    RunConfig cfg = tiny_run();
    write_file(dir + "/config.json", serialize_run_config(cfg));
    CHECK(cmd_train(dir + "/config.json", "joint", -1, dir + "/run") == 0);

    RunConfig other = cfg;
    other.model.d = 16;
    other.model.d_t = 16;
    other.model.d_v = 16;
    write_file(dir + "/other.json", serialize_run_config(other));
    CHECK_THROWS_WITH_AS(cmd_eval(dir + "/run/stage0.ckpt", dir + "/other.json", ""),
                         "checkpoint model configuration disagrees with the config file",
                         config_error);

    // a matching config with different eval sizes is accepted
    RunConfig bigger_eval = cfg;
    bigger_eval.data.eval_mcq = 6;
    write_file(dir + "/eval_cfg.json", serialize_run_config(bigger_eval));
    CHECK(cmd_eval(dir + "/run/stage0.ckpt", dir + "/eval_cfg.json", "") == 0);
}

TEST_CASE("ablate: unknown grids are refused before any work happens") {
    CHECK_THROWS_WITH_AS(cmd_ablate("nowhere.json", "table9", 1, ""),
                         "unknown ablation grid: table9", config_error);
}

TEST_CASE("dump-prompt-maps: a promptless checkpoint is refused, a prompted one writes maps") {
    const std::string dir = scratch_dir();
    const RunConfig cfg = tiny_run();

    const QAdaptModel plain = QAdaptModel::make(cfg.model, 5, false);
    save_checkpoint(dir + "/plain.ckpt", plain, cfg, 0);
    CHECK_THROWS_WITH_AS(cmd_dump_prompt_maps(dir + "/plain.ckpt", 2, dir + "/maps"),
                         "checkpoint has no prompt module, nothing to dump", config_error);

    const QAdaptModel prompted = QAdaptModel::make(cfg.model, 5, true);
    save_checkpoint(dir + "/prompted.ckpt", prompted, cfg, 1);
    CHECK(cmd_dump_prompt_maps(dir + "/prompted.ckpt", 3, dir + "/maps") == 0);
    for (const std::size_t i : {std::size_t{0}, std::size_t{1}, std::size_t{2}}) {
        const std::string base = dir + "/maps/sample" + std::to_string(i);
        CHECK(std::filesystem::exists(base + "_feature.pgm"));
        CHECK(std::filesystem::exists(base + "_modulation.pgm"));
        CHECK(std::filesystem::exists(base + "_instruction.txt"));
        CHECK(read_file(base + "_feature.pgm").rfind("P5\n", 0) == 0);
    }
}
