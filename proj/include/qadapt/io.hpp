#pragma once

// Run configuration, the checkpoint format, CSV/PGM/JSON-lines writers, and
// the subcommand implementations behind the command line tool. Every format
// is deterministic: identical config and seed produce identical bytes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "qadapt/metrics.hpp"
#include "qadapt/model.hpp"
#include "qadapt/staging.hpp"
#include "qadapt/synth.hpp"

namespace qadapt {

struct version_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// run configuration

struct RunConfig {
    ModelConfig model;
    DataConfig data;  // height always mirrors model.height
    std::string strategy = "progressive";
    std::vector<std::uint64_t> seeds = {1};
    double lr = 0.0;  // > 0 replaces every stage's base rate
    std::size_t epochs_multiplier = 3;
    std::size_t batch_size = 4;
    double warmup_ratio = 0.03;
    bool continue_connector = true;
    std::string out_dir = "runs";

    void validate() const {
        model.validate();
        if (model.vocab != Vocabulary::size())
            throw config_error("config field model.vocab must equal the task vocabulary size " +
                               std::to_string(Vocabulary::size()));
        if (data.height != model.height)
            throw config_error("config field data.height must match model.height");
        if (data.fraction < 0.0 || data.fraction > 1.0)
            throw config_error("config field data.fraction must lie in [0,1]");
        if (data.train == 0) throw config_error("config field data.train must be positive");
        if (data.eval_mcq == 0 || data.eval_expl == 0 || data.eval_yesno == 0 ||
            data.eval_how == 0)
            throw config_error("config fields data.eval_* must be positive");
        if (builtin_strategies().count(strategy) == 0)
            throw config_error("config field strategy names no builtin strategy: " + strategy);
        if (seeds.empty()) throw config_error("config field seeds must be non-empty");
        if (lr < 0.0) throw config_error("config field lr must be non-negative");
        if (epochs_multiplier == 0)
            throw config_error("config field epochs_multiplier must be positive");
        if (batch_size == 0) throw config_error("config field batch_size must be positive");
        if (warmup_ratio < 0.0 || warmup_ratio > 1.0)
            throw config_error("config field warmup_ratio must lie in [0,1]");
        if (out_dir.empty()) throw config_error("config field out_dir must be non-empty");
    }

    TrainConfig train_config() const {
        TrainConfig tc;
        tc.batch_size = batch_size;
        tc.epoch_multiplier = epochs_multiplier;
        tc.warmup_ratio = warmup_ratio;
        tc.lr_override = lr;
        tc.continue_connector = continue_connector;
        return tc;
    }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::string& scope,
                                const std::set<std::string>& allowed) {
    for (const auto& item : j.items())
        if (allowed.count(item.key()) == 0)
            throw config_error("unknown config field: " + scope + item.key());
}

inline void require_object(const nlohmann::json& j, const std::string& what) {
    if (!j.is_object()) throw config_error("config field must be an object: " + what);
}

inline std::size_t get_uint(const nlohmann::json& j, const std::string& scope,
                            const std::string& key, std::size_t dflt) {
    if (!j.contains(key)) return dflt;
    const nlohmann::json& v = j.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0)
        throw config_error("config field must be a non-negative integer: " + scope + key);
    return static_cast<std::size_t>(v.get<long long>());
}

inline double get_double(const nlohmann::json& j, const std::string& scope,
                         const std::string& key, double dflt) {
    if (!j.contains(key)) return dflt;
    const nlohmann::json& v = j.at(key);
    if (!v.is_number()) throw config_error("config field must be a number: " + scope + key);
    return v.get<double>();
}

inline bool get_bool(const nlohmann::json& j, const std::string& scope, const std::string& key,
                     bool dflt) {
    if (!j.contains(key)) return dflt;
    const nlohmann::json& v = j.at(key);
    if (!v.is_boolean()) throw config_error("config field must be a boolean: " + scope + key);
    return v.get<bool>();
}

inline std::string get_string(const nlohmann::json& j, const std::string& scope,
                              const std::string& key, const std::string& dflt) {
    if (!j.contains(key)) return dflt;
    const nlohmann::json& v = j.at(key);
    if (!v.is_string()) throw config_error("config field must be a string: " + scope + key);
    return v.get<std::string>();
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw config_error(std::string("config is not valid JSON: ") + e.what());
    }
    detail::require_object(j, "<root>");
    detail::reject_unknown_keys(j, "", {"model", "data", "strategy", "seeds", "lr",
                                        "epochs_multiplier", "batch_size", "warmup_ratio",
                                        "continue_connector", "out_dir"});
    RunConfig c;

    if (j.contains("model")) {
        const nlohmann::json& m = j.at("model");
        detail::require_object(m, "model");
        detail::reject_unknown_keys(
            m, "model.",
            {"height", "patch", "d_v", "d_t", "d", "heads", "encoder_depth", "decoder_depth",
             "generator_depth", "vocab", "max_context", "queries", "m_t_max", "rank", "alpha",
             "variant"});
        c.model.height = detail::get_uint(m, "model.", "height", c.model.height);
        c.model.patch = detail::get_uint(m, "model.", "patch", c.model.patch);
        c.model.d_v = detail::get_uint(m, "model.", "d_v", c.model.d_v);
        c.model.d_t = detail::get_uint(m, "model.", "d_t", c.model.d_t);
        c.model.d = detail::get_uint(m, "model.", "d", c.model.d);
        c.model.heads = detail::get_uint(m, "model.", "heads", c.model.heads);
        c.model.encoder_depth = detail::get_uint(m, "model.", "encoder_depth", c.model.encoder_depth);
        c.model.decoder_depth = detail::get_uint(m, "model.", "decoder_depth", c.model.decoder_depth);
        c.model.generator_depth =
            detail::get_uint(m, "model.", "generator_depth", c.model.generator_depth);
        c.model.vocab = detail::get_uint(m, "model.", "vocab", c.model.vocab);
        c.model.max_context = detail::get_uint(m, "model.", "max_context", c.model.max_context);
        c.model.queries = detail::get_uint(m, "model.", "queries", c.model.queries);
        c.model.m_t_max = detail::get_uint(m, "model.", "m_t_max", c.model.m_t_max);
        c.model.rank = detail::get_uint(m, "model.", "rank", c.model.rank);
        c.model.alpha = detail::get_double(m, "model.", "alpha", c.model.alpha);
        c.model.variant = parse_variant(
            detail::get_string(m, "model.", "variant",
                               c.model.variant == GeneratorVariant::qformer ? "qformer" : "bert"));
    }

    c.data.height = c.model.height;
    if (j.contains("data")) {
        const nlohmann::json& d = j.at("data");
        detail::require_object(d, "data");
        detail::reject_unknown_keys(d, "data.",
                                    {"train", "eval_mcq", "eval_expl", "eval_yesno", "eval_how",
                                     "fraction", "data_seed", "height"});
        c.data.train = detail::get_uint(d, "data.", "train", c.data.train);
        c.data.eval_mcq = detail::get_uint(d, "data.", "eval_mcq", c.data.eval_mcq);
        c.data.eval_expl = detail::get_uint(d, "data.", "eval_expl", c.data.eval_expl);
        c.data.eval_yesno = detail::get_uint(d, "data.", "eval_yesno", c.data.eval_yesno);
        c.data.eval_how = detail::get_uint(d, "data.", "eval_how", c.data.eval_how);
        c.data.fraction = detail::get_double(d, "data.", "fraction", c.data.fraction);
        c.data.data_seed = detail::get_uint(d, "data.", "data_seed", c.data.data_seed);
        c.data.height = detail::get_uint(d, "data.", "height", c.data.height);
    }

    c.strategy = detail::get_string(j, "", "strategy", c.strategy);
    if (j.contains("seeds")) {
        const nlohmann::json& s = j.at("seeds");
        if (!s.is_array()) throw config_error("config field must be an array: seeds");
        c.seeds.clear();
        for (const nlohmann::json& v : s) {
            if (!v.is_number_integer() || v.get<long long>() < 0)
                throw config_error("config field seeds must hold non-negative integers");
            c.seeds.push_back(static_cast<std::uint64_t>(v.get<long long>()));
        }
    }
    c.lr = detail::get_double(j, "", "lr", c.lr);
    c.epochs_multiplier = detail::get_uint(j, "", "epochs_multiplier", c.epochs_multiplier);
    c.batch_size = detail::get_uint(j, "", "batch_size", c.batch_size);
    c.warmup_ratio = detail::get_double(j, "", "warmup_ratio", c.warmup_ratio);
    c.continue_connector = detail::get_bool(j, "", "continue_connector", c.continue_connector);
    c.out_dir = detail::get_string(j, "", "out_dir", c.out_dir);

    c.validate();
    return c;
}

inline std::string serialize_run_config(const RunConfig& c) {
    nlohmann::ordered_json j;
    j["model"] = {{"height", c.model.height},
                  {"patch", c.model.patch},
                  {"d_v", c.model.d_v},
                  {"d_t", c.model.d_t},
                  {"d", c.model.d},
                  {"heads", c.model.heads},
                  {"encoder_depth", c.model.encoder_depth},
                  {"decoder_depth", c.model.decoder_depth},
                  {"generator_depth", c.model.generator_depth},
                  {"vocab", c.model.vocab},
                  {"max_context", c.model.max_context},
                  {"queries", c.model.queries},
                  {"m_t_max", c.model.m_t_max},
                  {"rank", c.model.rank},
                  {"alpha", c.model.alpha},
                  {"variant", c.model.variant == GeneratorVariant::qformer ? "qformer" : "bert"}};
    j["data"] = {{"train", c.data.train},
                 {"eval_mcq", c.data.eval_mcq},
                 {"eval_expl", c.data.eval_expl},
                 {"eval_yesno", c.data.eval_yesno},
                 {"eval_how", c.data.eval_how},
                 {"fraction", c.data.fraction},
                 {"data_seed", c.data.data_seed},
                 {"height", c.data.height}};
    j["strategy"] = c.strategy;
    j["seeds"] = c.seeds;
    j["lr"] = c.lr;
    j["epochs_multiplier"] = c.epochs_multiplier;
    j["batch_size"] = c.batch_size;
    j["warmup_ratio"] = c.warmup_ratio;
    j["continue_connector"] = c.continue_connector;
    j["out_dir"] = c.out_dir;
    return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// plain file helpers

inline std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw data_error("cannot open for reading: " + path);
    std::string out((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (f.bad()) throw data_error("read failed: " + path);
    return out;
}

inline void write_file(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw data_error("cannot open for writing: " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f) throw data_error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// checkpoint format: "QADP" | version u32 | tensor count u32 | per tensor
// (name len u32, name, ndim u32, dims u32.., dtype u8 = 0 for f32, payload
// little-endian row-major) | config len u32, config JSON, stage u32.
// Parameters hold f64 in memory and f32 on disk; the round-trip guarantee is
// at f32 precision.

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_f32(std::string& out, float f) {
    std::uint32_t bits = 0;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
}

struct Cursor {
    const std::string& buf;
    std::size_t off = 0;

    void need(std::size_t n, const char* what) const {
        if (off + n > buf.size())
            throw data_error("checkpoint truncated at byte " + std::to_string(buf.size()) +
                             " while reading " + what + " at offset " + std::to_string(off));
    }

    std::uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<std::uint8_t>(buf[off++]);
    }

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i)
            v = (v << 8) | static_cast<std::uint8_t>(buf[off + static_cast<std::size_t>(i)]);
        off += 4;
        return v;
    }

    std::string bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string s = buf.substr(off, n);
        off += n;
        return s;
    }

    float f32(const char* what) {
        const std::uint32_t bits = u32(what);
        float f = 0.0f;
        std::memcpy(&f, &bits, 4);
        return f;
    }
};

}  // namespace detail

inline std::string checkpoint_bytes(const QAdaptModel& model, const RunConfig& config,
                                    std::uint32_t stage) {
    std::string out = "QADP";
    detail::put_u32(out, 1);
    const std::vector<ParameterStore::Entry>& entries = model.store.entries();
    detail::put_u32(out, static_cast<std::uint32_t>(entries.size()));
    for (const ParameterStore::Entry& e : entries) {
        detail::put_u32(out, static_cast<std::uint32_t>(e.name.size()));
        out += e.name;
        const std::vector<std::size_t>& dims = e.tensor.dims();
        detail::put_u32(out, static_cast<std::uint32_t>(dims.size()));
        for (std::size_t d : dims) detail::put_u32(out, static_cast<std::uint32_t>(d));
        out.push_back('\0');  // dtype tag 0: 32-bit float
        for (double v : e.tensor.data()) detail::put_f32(out, static_cast<float>(v));
    }
    const std::string cfg_json = serialize_run_config(config);
    detail::put_u32(out, static_cast<std::uint32_t>(cfg_json.size()));
    out += cfg_json;
    detail::put_u32(out, stage);
    return out;
}

inline void save_checkpoint(const std::string& path, const QAdaptModel& model,
                            const RunConfig& config, std::uint32_t stage) {
    write_file(path, checkpoint_bytes(model, config, stage));
}

struct LoadedCheckpoint {
    std::uint32_t version = 1;
    std::vector<std::pair<std::string, Tensor>> tensors;
    RunConfig config;
    std::uint32_t stage = 0;
};

inline LoadedCheckpoint parse_checkpoint(const std::string& bytes) {
    detail::Cursor cur{bytes};
    if (cur.bytes(4, "magic") != "QADP")
        throw version_error("not a checkpoint: magic bytes are not QADP");
    LoadedCheckpoint ck;
    ck.version = cur.u32("version");
    if (ck.version != 1)
        throw version_error("unsupported checkpoint version " + std::to_string(ck.version));
    const std::uint32_t count = cur.u32("tensor count");
    for (std::uint32_t t = 0; t < count; ++t) {
        const std::uint32_t name_len = cur.u32("name length");
        if (name_len == 0 || name_len > 4096)
            throw data_error("checkpoint tensor name length " + std::to_string(name_len) +
                             " out of range at offset " + std::to_string(cur.off - 4));
        const std::string name = cur.bytes(name_len, "tensor name");
        const std::uint32_t ndim = cur.u32("tensor rank");
        if (ndim == 0 || ndim > 8)
            throw data_error("checkpoint tensor rank " + std::to_string(ndim) +
                             " out of range for " + name);
        std::vector<std::size_t> dims;
        std::size_t total = 1;
        for (std::uint32_t i = 0; i < ndim; ++i) {
            const std::uint32_t d = cur.u32("tensor dim");
            if (d == 0 || total > (1u << 28) / d)
                throw data_error("checkpoint tensor size out of range for " + name);
            dims.push_back(d);
            total *= d;
        }
        const std::uint8_t dtype = cur.u8("dtype tag");
        if (dtype != 0)
            throw version_error("unsupported tensor dtype tag " + std::to_string(dtype) +
                                " for " + name + " at offset " + std::to_string(cur.off - 1));
        std::vector<double> data(total);
        for (std::size_t i = 0; i < total; ++i)
            data[i] = static_cast<double>(cur.f32("tensor payload"));
        ck.tensors.emplace_back(name, Tensor::from_data(std::move(dims), std::move(data)));
    }
    const std::uint32_t cfg_len = cur.u32("config length");
    ck.config = parse_run_config(cur.bytes(cfg_len, "config echo"));
    ck.stage = cur.u32("stage index");
    if (cur.off != bytes.size())
        throw data_error("checkpoint has " + std::to_string(bytes.size() - cur.off) +
                         " trailing bytes after offset " + std::to_string(cur.off));
    return ck;
}

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    return parse_checkpoint(read_file(path));
}

// Rebuilds the saved model: prompt module and adapters are reattached when
// the tensor table holds their names, then every parameter is overwritten.
inline QAdaptModel model_from_checkpoint(const LoadedCheckpoint& ck) {
    bool with_prompt = false, with_vision = false, with_llm = false;
    for (const auto& [name, tensor] : ck.tensors) {
        if (name.rfind("prompt.", 0) == 0) with_prompt = true;
        if (name.rfind("encoder.", 0) == 0 && name.find(".lora.") != std::string::npos)
            with_vision = true;
        if (name.rfind("decoder.", 0) == 0 && name.find(".lora.") != std::string::npos)
            with_llm = true;
    }
    QAdaptModel m = QAdaptModel::make(ck.config.model, 0, with_prompt);
    if (with_vision) m.attach_vision_lora(0);
    if (with_llm) m.attach_llm_lora(0);

    std::set<std::string> pending;
    for (const ParameterStore::Entry& e : m.store.entries()) pending.insert(e.name);
    for (const auto& [name, tensor] : ck.tensors) {
        if (pending.erase(name) == 0) throw data_error("checkpoint tensor not in model: " + name);
        Tensor& dst = m.store.get(name);
        if (dst.dims() != tensor.dims())
            throw shape_error("checkpoint tensor shape mismatch: " + name);
        std::vector<double>& d = dst.mutable_data();
        const std::vector<double>& s = tensor.data();
        std::copy(s.begin(), s.end(), d.begin());
    }
    if (!pending.empty())
        throw data_error("model parameter missing from checkpoint: " + *pending.begin());
    return m;
}

// ---------------------------------------------------------------------------
// CSV and PGM writers

inline std::string format_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string train_csv_text(const TrainReport& r) {
    std::string s = "stage,step,lr,loss\n";
    for (const StepRecord& t : r.steps)
        s += std::to_string(t.stage) + "," + std::to_string(t.step) + "," + format_g17(t.lr) +
             "," + format_g17(t.loss) + "\n";
    return s;
}

inline std::string metrics_csv_header() {
    return "strategy,seed,acc_mcq,acc_yesno,acc_howwhat,srocc,plcc,expl_ppl,dropped\n";
}

inline std::string metrics_csv_row(const EvalReport& r) {
    return r.strategy + "," + std::to_string(r.seed) + "," + format_g17(r.acc_mcq) + "," +
           format_g17(r.acc_yesno) + "," + format_g17(r.acc_howwhat) + "," + format_g17(r.srocc) +
           "," + format_g17(r.plcc) + "," + format_g17(r.expl_ppl) + "," +
           std::to_string(r.dropped) + "\n";
}

inline void append_metrics_row(const std::string& path, const EvalReport& r) {
    std::string text;
    if (!std::filesystem::exists(path)) text = metrics_csv_header();
    text += metrics_csv_row(r);
    std::ofstream f(path, std::ios::binary | std::ios::app);
    if (!f) throw data_error("cannot open for writing: " + path);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    f.flush();
    if (!f) throw data_error("write failed: " + path);
}

// Binary P5, 8-bit, map values scaled by 255.
inline std::string pgm_bytes(const Tensor& map) {
    if (map.dims().size() != 2) throw shape_error("PGM needs a rank-2 map");
    const std::size_t h = map.dims()[0], w = map.dims()[1];
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    for (double v : map.data()) {
        const long q = std::lround(v * 255.0);
        out.push_back(static_cast<char>(std::clamp(q, 0l, 255l)));
    }
    return out;
}

inline void write_pgm(const std::string& path, const Tensor& map) {
    write_file(path, pgm_bytes(map));
}

// ---------------------------------------------------------------------------
// subcommands

namespace detail {

inline std::string words_text(const std::vector<int>& ids) {
    std::string s;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) s += ' ';
        s += Vocabulary::words().at(static_cast<std::size_t>(ids[i]));
    }
    return s;
}

inline RunConfig load_run_config(const std::string& config_path) {
    return parse_run_config(read_file(config_path));
}

inline const Strategy& builtin_strategy(const std::string& name) {
    static const std::map<std::string, Strategy> all = builtin_strategies();
    const auto it = all.find(name);
    if (it == all.end()) throw config_error("unknown strategy: " + name);
    return it->second;
}

}  // namespace detail

inline int cmd_gen_data(const std::string& config_path, const std::string& out_dir) {
    const RunConfig cfg = detail::load_run_config(config_path);
    const Dataset data(cfg.data);
    std::filesystem::create_directories(out_dir);
    std::string text;
    for (std::size_t i = 0; i < cfg.data.train; ++i) {
        const TrainingSample s = data.train_sample(i);
        nlohmann::ordered_json line;
        line["seed"] = cfg.data.data_seed;
        line["index"] = i;
        line["task"] = s.task == TaskKind::explanation ? "explanation" : "answering";
        line["instruction_ids"] = s.instruction;
        line["target_ids"] = s.target;
        line["severities"] = s.record.severities;
        line["score"] = s.record.score;
        line["gold"] = s.gold_token;
        text += line.dump() + "\n";
    }
    const std::string path = out_dir + "/train.jsonl";
    write_file(path, text);
    std::printf("wrote %zu lines to %s\n", cfg.data.train, path.c_str());
    return 0;
}

inline int cmd_train(const std::string& config_path, const std::string& strategy_flag,
                     long long seed_flag, const std::string& out_flag) {
    RunConfig cfg = detail::load_run_config(config_path);
    if (!strategy_flag.empty()) cfg.strategy = strategy_flag;
    if (!out_flag.empty()) cfg.out_dir = out_flag;
    cfg.validate();
    const std::uint64_t seed =
        seed_flag >= 0 ? static_cast<std::uint64_t>(seed_flag) : cfg.seeds.front();

    const Strategy& strategy = detail::builtin_strategy(cfg.strategy);
    const Dataset data(cfg.data);
    std::filesystem::create_directories(cfg.out_dir);

    QAdaptModel model = QAdaptModel::make(cfg.model, seed, strategy_needs_prompt(strategy));

    RunConfig echo = cfg;  // the checkpoint records the run it came from
    echo.seeds = {seed};

    TrainConfig tc = cfg.train_config();
    tc.on_stage_end = [&](const QAdaptModel& m, std::size_t k, const StageRecord&) {
        save_checkpoint(cfg.out_dir + "/stage" + std::to_string(k) + ".ckpt", m, echo,
                        static_cast<std::uint32_t>(k));
    };

    const TrainReport report = run_strategy(model, strategy, data, seed, tc);

    write_file(cfg.out_dir + "/train.csv", train_csv_text(report));
    append_metrics_row(cfg.out_dir + "/metrics.csv", report.metrics);
    std::printf("%s", metrics_csv_header().c_str());
    std::printf("%s", metrics_csv_row(report.metrics).c_str());
    return 0;
}

inline int cmd_eval(const std::string& ckpt_path, const std::string& config_path,
                    const std::string& metrics_out) {
    const LoadedCheckpoint ck = load_checkpoint(ckpt_path);
    RunConfig cfg = ck.config;
    if (!config_path.empty()) {
        RunConfig file_cfg = detail::load_run_config(config_path);
        RunConfig probe = cfg;
        probe.model = file_cfg.model;
        probe.data.height = file_cfg.model.height;
        if (serialize_run_config(probe) != serialize_run_config(cfg))
            throw config_error("checkpoint model configuration disagrees with the config file");
        cfg.data = file_cfg.data;  // evaluation set sizes may differ from the run
    }
    QAdaptModel model = model_from_checkpoint(ck);
    const Strategy& strategy = detail::builtin_strategy(cfg.strategy);
    const std::size_t stage =
        std::min<std::size_t>(ck.stage, strategy.stages.size() - 1);
    const bool use_prompt = strategy.stages[stage].use_prompt;

    const Dataset data(cfg.data);
    const EvalReport report =
        evaluate(model, data, use_prompt, cfg.strategy, cfg.seeds.front());
    std::printf("%s", metrics_csv_header().c_str());
    std::printf("%s", metrics_csv_row(report).c_str());
    if (!metrics_out.empty()) append_metrics_row(metrics_out, report);
    return 0;
}

inline int cmd_gradcheck(const std::string& config_path, double eps = 1e-5,
                         std::size_t probes = 4) {
    const RunConfig cfg = detail::load_run_config(config_path);
    const Dataset data(cfg.data);
    const std::uint64_t seed = cfg.seeds.front();

    QAdaptModel model = QAdaptModel::make(cfg.model, seed, true);
    model.attach_vision_lora(derive_seed(seed, "vision-lora", 0));
    model.attach_llm_lora(derive_seed(seed, "llm-lora", 0));
    // B starts at zero, which would zero every A gradient; give B small
    // deterministic values so both adapter factors carry signal
    for (const ParameterStore::Entry& e : model.store.entries())
        if (e.name.size() > 7 && e.name.rfind(".lora.B") == e.name.size() - 7) {
            std::vector<double>& d = model.store.get(e.name).mutable_data();
            for (std::size_t i = 0; i < d.size(); ++i)
                d[i] = static_cast<double>((i * 7 + 5) % 19 - 9) / 90.0;
        }

    const TrainingSample sample = data.train_sample(0);
    const auto loss_fn = [&](Graph& g) { return model.batch_loss(g, {sample}, true); };

    const double tolerance = 1e-4;
    bool ok = true;
    for (const char* group : {"encoder", "connector", "decoder", "prompt-module", "vision-lora",
                              "llm-lora"}) {
        model.store.set_trainable({group});
        const GradCheckResult r = grad_check(loss_fn, model.store, eps, probes);
        const bool pass = r.max_rel_err <= tolerance;
        ok = ok && pass;
        std::printf("%-14s max_rel_err %.3e over %zu coords (worst %s) %s\n", group,
                    r.max_rel_err, r.coords_checked, r.worst_param.c_str(),
                    pass ? "ok" : "FAIL");
    }
    return ok ? 0 : 1;
}

inline int cmd_ablate(const std::string& config_path, const std::string& grid,
                      std::size_t n_seeds, const std::string& out_flag) {
    if (grid != "table5") throw config_error("unknown ablation grid: " + grid);
    if (n_seeds == 0) throw config_error("ablate needs at least one seed");
    RunConfig cfg = detail::load_run_config(config_path);
    if (!out_flag.empty()) cfg.out_dir = out_flag;
    std::filesystem::create_directories(cfg.out_dir);

    std::vector<std::uint64_t> seeds = cfg.seeds;
    while (seeds.size() < n_seeds) seeds.push_back(seeds.back() + 1);
    seeds.resize(n_seeds);

    const Dataset data(cfg.data);
    const std::map<std::string, Strategy> all = builtin_strategies();

    std::string rows_csv = metrics_csv_header();
    std::string summary =
        "variant,seeds,acc_mcq_mean,acc_mcq_std,acc_yesno_mean,acc_yesno_std,"
        "acc_howwhat_mean,acc_howwhat_std,srocc_mean,srocc_std,plcc_mean,plcc_std,"
        "expl_ppl_mean,expl_ppl_std,dropped_mean,dropped_std\n";

    for (const std::string& variant : ablation_variants()) {
        const Strategy& strategy = all.at(variant);
        std::vector<EvalReport> cell;
        for (const std::uint64_t seed : seeds) {
            QAdaptModel model =
                QAdaptModel::make(cfg.model, seed, strategy_needs_prompt(strategy));
            const TrainReport rep = run_strategy(model, strategy, data, seed, cfg.train_config());
            rows_csv += metrics_csv_row(rep.metrics);
            cell.push_back(rep.metrics);
            std::printf("%-28s seed %llu mcq %.3f ppl %.3f\n", variant.c_str(),
                        static_cast<unsigned long long>(seed), rep.metrics.acc_mcq,
                        rep.metrics.expl_ppl);
        }
        const auto stat = [&](const std::function<double(const EvalReport&)>& pick) {
            double mean = 0.0;
            for (const EvalReport& r : cell) mean += pick(r);
            mean /= static_cast<double>(cell.size());
            double var = 0.0;
            for (const EvalReport& r : cell) var += (pick(r) - mean) * (pick(r) - mean);
            var /= static_cast<double>(cell.size());
            return std::pair<double, double>(mean, std::sqrt(var));
        };
        summary += variant + "," + std::to_string(seeds.size());
        for (const auto& [mean, sd] :
             {stat([](const EvalReport& r) { return r.acc_mcq; }),
              stat([](const EvalReport& r) { return r.acc_yesno; }),
              stat([](const EvalReport& r) { return r.acc_howwhat; }),
              stat([](const EvalReport& r) { return r.srocc; }),
              stat([](const EvalReport& r) { return r.plcc; }),
              stat([](const EvalReport& r) { return r.expl_ppl; }),
              stat([](const EvalReport& r) { return static_cast<double>(r.dropped); })})
            summary += "," + format_g17(mean) + "," + format_g17(sd);
        summary += "\n";
    }
    write_file(cfg.out_dir + "/ablate.csv", rows_csv);
    write_file(cfg.out_dir + "/summary.csv", summary);
    std::printf("wrote %s/ablate.csv and %s/summary.csv\n", cfg.out_dir.c_str(),
                cfg.out_dir.c_str());
    return 0;
}

inline int cmd_dump_prompt_maps(const std::string& ckpt_path, std::size_t samples,
                                const std::string& out_dir) {
    const LoadedCheckpoint ck = load_checkpoint(ckpt_path);
    QAdaptModel model = model_from_checkpoint(ck);
    if (!model.has_prompt())
        throw config_error("checkpoint has no prompt module, nothing to dump");
    const Dataset data(ck.config.data);
    std::filesystem::create_directories(out_dir);

    for (std::size_t i = 0; i < samples; ++i) {
        // round-robin over the four evaluation streams
        const std::size_t idx = i / 4;
        TrainingSample s;
        switch (i % 4) {
            case 0: s = data.eval_expl_sample(idx); break;
            case 1: s = data.eval_mcq_sample(idx); break;
            case 2: s = data.eval_yesno_sample(idx); break;
            default: s = data.eval_how_sample(idx); break;
        }
        Graph g(false);
        const EncodeResult enc = model.build_prefix(g, s.image, s.instruction, true);
        const std::string base = out_dir + "/sample" + std::to_string(i);
        write_pgm(base + "_feature.pgm", feature_norm_map(enc.visual));
        write_pgm(base + "_modulation.pgm", prompt_map(enc.visual, enc.prompt_out.modulated));
        write_file(base + "_instruction.txt", detail::words_text(s.instruction) + "\n");
    }
    std::printf("wrote %zu sample map pairs to %s\n", samples, out_dir.c_str());
    return 0;
}

}  // namespace qadapt
