#pragma once

// Progressive instruction tuning: freeze plans over parameter groups, task
// filters, the AdamW optimizer with a warmup-cosine schedule, and a stage
// runner. Ships the progressive, joint, and two-stage strategies plus the
// nine single-change ablation variants.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "qadapt/metrics.hpp"
#include "qadapt/model.hpp"
#include "qadapt/synth.hpp"

namespace qadapt {

enum class BoundaryAction { none, merge_lora };

struct StagePlan {
    std::string name;
    std::set<std::string> groups;  // trainable parameter groups
    std::set<TaskKind> tasks;      // which train-stream tasks the stage sees
    std::size_t epochs = 1;
    double lr = 3e-4;
    bool use_prompt = false;
};

struct Strategy {
    std::string name;
    std::vector<StagePlan> stages;
    std::vector<BoundaryAction> boundaries;  // one per stage transition
};

inline const std::set<std::string>& adapter_groups() {
    static const std::set<std::string> g = {"vision-lora", "llm-lora", "connector",
                                            "prompt-module"};
    return g;
}

inline void validate_plan(const StagePlan& p) {
    if (p.name.empty()) throw config_error("stage plan needs a name");
    if (p.groups.empty()) throw config_error("stage plan has no trainable groups: " + p.name);
    for (const std::string& g : p.groups)
        if (adapter_groups().count(g) == 0)
            throw config_error("unknown trainable group '" + g + "' in stage " + p.name);
    if (p.tasks.empty()) throw config_error("stage plan has an empty task filter: " + p.name);
    if (p.groups.count("prompt-module") != 0 && !p.use_prompt)
        throw config_error("training the prompt module requires use_prompt in stage " + p.name);
    if (p.epochs == 0) throw config_error("stage plan needs at least one epoch: " + p.name);
    if (!(p.lr > 0.0)) throw config_error("stage learning rate must be positive: " + p.name);
}

inline void validate_strategy(const Strategy& s) {
    if (s.stages.empty()) throw config_error("strategy has no stages: " + s.name);
    if (s.boundaries.size() + 1 != s.stages.size())
        throw config_error("strategy needs one boundary action per stage transition: " + s.name);
    for (const StagePlan& p : s.stages) validate_plan(p);
    for (std::size_t k = 0; k < s.boundaries.size(); ++k) {
        if (s.boundaries[k] != BoundaryAction::merge_lora) continue;
        bool lora_before = false;
        for (std::size_t j = 0; j <= k; ++j)
            lora_before = lora_before || s.stages[j].groups.count("vision-lora") != 0 ||
                          s.stages[j].groups.count("llm-lora") != 0;
        if (!lora_before)
            throw config_error("merge-lora boundary without a preceding adapter stage: " + s.name);
    }
}

inline bool strategy_needs_prompt(const Strategy& s) {
    for (const StagePlan& p : s.stages)
        if (p.use_prompt || p.groups.count("prompt-module") != 0) return true;
    return false;
}

// The named strategies: progressive (explanation-first, then prompt tuning
// on merged weights), the joint and two-stage baselines, and one variant
// per ablation row. Stage-2 variants share the default first stage.
inline std::map<std::string, Strategy> builtin_strategies() {
    const std::set<TaskKind> expl = {TaskKind::explanation};
    const std::set<TaskKind> ans = {TaskKind::answering};
    const std::set<TaskKind> both = {TaskKind::explanation, TaskKind::answering};
    const std::set<std::string> stage1_modules = {"vision-lora", "llm-lora", "connector"};
    const std::set<std::string> stage2_modules = {"connector", "prompt-module"};

    const auto plan = [](std::string name, std::set<std::string> groups, std::set<TaskKind> tasks,
                         bool prompt) {
        StagePlan p;
        p.name = std::move(name);
        p.groups = std::move(groups);
        p.tasks = std::move(tasks);
        p.use_prompt = prompt;
        return p;
    };
    const StagePlan stage1 = plan("stage1", stage1_modules, expl, false);

    std::map<std::string, Strategy> out;
    const auto add = [&out](std::string name, std::vector<StagePlan> stages,
                            std::vector<BoundaryAction> bounds) {
        Strategy s;
        s.name = std::move(name);
        s.stages = std::move(stages);
        s.boundaries = std::move(bounds);
        validate_strategy(s);
        out[s.name] = std::move(s);
    };

    add("progressive", {stage1, plan("stage2", stage2_modules, both, true)},
        {BoundaryAction::merge_lora});
    add("joint", {plan("joint", stage1_modules, both, false)}, {});
    add("two-stage",
        {plan("align", {"connector"}, expl, false),
         plan("finetune", {"connector", "llm-lora"}, both, false)},
        {BoundaryAction::none});

    add("stage1-explanation-only", {plan("stage1", stage1_modules, expl, false)}, {});
    add("stage1-answering-only", {plan("stage1", stage1_modules, ans, false)}, {});
    add("stage1-both-tasks", {plan("stage1", stage1_modules, both, false)}, {});
    add("stage1-with-prompt",
        {plan("stage1", {"vision-lora", "llm-lora", "connector", "prompt-module"}, both, true)},
        {});
    add("stage2-both-tasks", {stage1, plan("stage2", stage2_modules, both, true)},
        {BoundaryAction::merge_lora});
    add("stage2-explanation-only", {stage1, plan("stage2", stage2_modules, expl, true)},
        {BoundaryAction::merge_lora});
    add("stage2-answering-only", {stage1, plan("stage2", stage2_modules, ans, true)},
        {BoundaryAction::merge_lora});
    add("stage2-no-connector", {stage1, plan("stage2", {"prompt-module"}, both, true)},
        {BoundaryAction::merge_lora});
    add("stage2-with-llm-lora",
        {stage1, plan("stage2", {"llm-lora", "connector", "prompt-module"}, both, true)},
        {BoundaryAction::merge_lora});
    return out;
}

// Ablation grid rows, in table order: four single-stage rows, then five
// second-stage rows on top of the shared first stage.
inline const std::vector<std::string>& ablation_variants() {
    static const std::vector<std::string> rows = {
        "stage1-explanation-only", "stage1-answering-only",  "stage1-both-tasks",
        "stage1-with-prompt",      "stage2-both-tasks",      "stage2-explanation-only",
        "stage2-answering-only",   "stage2-no-connector",    "stage2-with-llm-lora"};
    return rows;
}

// Exactly the plan's groups become trainable.
inline void apply_freeze(QAdaptModel& model, const StagePlan& plan) {
    validate_plan(plan);
    for (const std::string& g : plan.groups)
        if (!model.store.has_group(g))
            throw config_error("model has no parameter group '" + g + "' for stage " + plan.name);
    model.store.set_trainable(plan.groups);
}

// Decoupled-weight-decay Adam; moment buffers exist for exactly the
// trainable parameters and are reset at each stage boundary.
struct AdamW {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    std::size_t t = 0;
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;

    void reset(const ParameterStore& store) {
        t = 0;
        m.clear();
        v.clear();
        for (const ParameterStore::Entry& e : store.entries())
            if (e.tensor.requires_grad()) {
                m[e.name].assign(e.tensor.size(), 0.0);
                v[e.name].assign(e.tensor.size(), 0.0);
            }
    }

    void step(ParameterStore& store, double lr_t) {
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        std::size_t trainable = 0;
        for (const ParameterStore::Entry& e : store.entries()) {
            if (!e.tensor.requires_grad()) continue;
            ++trainable;
            auto mi = m.find(e.name);
            if (mi == m.end())
                throw state_error("optimizer has no moments for trainable parameter: " + e.name);
            Tensor& p = store.get(e.name);
            if (!p.has_grad())
                throw state_error("missing gradient for trainable parameter: " + e.name);
            const std::vector<double>& g = p.grad();
            std::vector<double>& mm = mi->second;
            std::vector<double>& vv = v[e.name];
            std::vector<double>& w = p.mutable_data();
            for (std::size_t i = 0; i < w.size(); ++i) {
                mm[i] = beta1 * mm[i] + (1.0 - beta1) * g[i];
                vv[i] = beta2 * vv[i] + (1.0 - beta2) * g[i] * g[i];
                const double mhat = mm[i] / bc1;
                const double vhat = vv[i] / bc2;
                w[i] -= lr_t * (mhat / (std::sqrt(vhat) + eps) + weight_decay * w[i]);
            }
        }
        if (trainable != m.size())
            throw state_error("optimizer moments do not match the trainable set");
    }
};

inline void adamw_step(AdamW& opt, ParameterStore& store, double lr_t) { opt.step(store, lr_t); }

// Linear warmup over ceil(ratio * total) steps, then cosine decay to zero
// at the final step. Degenerate spans hold the base rate.
inline double lr_schedule(std::size_t step, std::size_t total_steps, double base_lr,
                          double warmup_ratio = 0.03) {
    if (total_steps == 0) throw config_error("schedule needs at least one step");
    if (step >= total_steps) throw config_error("schedule step out of range");
    const std::size_t warmup =
        static_cast<std::size_t>(std::ceil(warmup_ratio * static_cast<double>(total_steps)));
    if (step < warmup)
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup);
    if (total_steps - 1 <= warmup) return base_lr;
    const double progress = static_cast<double>(step - warmup) /
                            static_cast<double>(total_steps - 1 - warmup);
    return base_lr * 0.5 * (1.0 + std::cos(3.141592653589793238462643383279502884 * progress));
}

struct StepRecord {
    std::size_t stage = 0;
    std::size_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct StageRecord {
    StagePlan plan;
    std::size_t total_steps = 0;
    double first_loss = 0.0;
    double last_loss = 0.0;
    std::set<std::string> changed_groups;  // groups whose bytes moved during the stage
    EvalReport metrics;                    // filled when eval_each_stage is set
};

struct TrainConfig {
    std::size_t batch_size = 4;
    std::size_t epoch_multiplier = 3;  // scales every stage's epoch count
    double warmup_ratio = 0.03;
    double lr_override = 0.0;        // > 0 replaces every stage's base rate
    bool continue_connector = true;  // later stages keep earlier connector weights
    bool run_eval = true;
    bool eval_each_stage = false;  // evaluate after every stage boundary
    // observation hooks: start fires after adapters attach and the freeze is
    // applied; end fires after the boundary action, when the stage's record
    // is complete
    std::function<void(const QAdaptModel&, std::size_t, const StagePlan&)> on_stage_start;
    std::function<void(const QAdaptModel&, std::size_t, const StageRecord&)> on_stage_end;
};

struct TrainReport {
    std::string strategy;
    std::uint64_t seed = 0;
    std::vector<StepRecord> steps;
    std::vector<StageRecord> stages;
    EvalReport metrics;
};

// Per-group concatenation of parameter bytes, in registration order.
inline std::map<std::string, std::vector<double>> snapshot_groups(const ParameterStore& store) {
    std::map<std::string, std::vector<double>> out;
    for (const ParameterStore::Entry& e : store.entries()) {
        std::vector<double>& dst = out[e.group];
        const std::vector<double>& src = e.tensor.data();
        dst.insert(dst.end(), src.begin(), src.end());
    }
    return out;
}

inline void reinit_connector(QAdaptModel& model, std::uint64_t seed) {
    Rng rng(seed);
    const double sd = 1.0 / std::sqrt(static_cast<double>(model.cfg.d_v));
    for (double& x : model.store.get("connector.weight").mutable_data()) x = rng.normal(0.0, sd);
    for (double& x : model.store.get("connector.bias").mutable_data()) x = 0.0;
}

// Runs the stages in order: attach missing adapters, freeze to the plan,
// train on the filtered stream with a fresh optimizer and schedule, then
// apply the boundary action. Samples batch up in index order; the report
// records per-step losses and which groups actually changed.
inline TrainReport run_strategy(QAdaptModel& model, const Strategy& strategy, const Dataset& data,
                                std::uint64_t seed, const TrainConfig& cfg = {}) {
    validate_strategy(strategy);
    if (cfg.batch_size == 0) throw config_error("batch size must be positive");
    if (cfg.epoch_multiplier == 0) throw config_error("epoch multiplier must be positive");

    TrainReport report;
    report.strategy = strategy.name;
    report.seed = seed;

    for (std::size_t k = 0; k < strategy.stages.size(); ++k) {
        StagePlan plan = strategy.stages[k];
        if (cfg.lr_override > 0.0) plan.lr = cfg.lr_override;

        if (plan.groups.count("vision-lora") != 0 && !model.store.has_group("vision-lora"))
            model.attach_vision_lora(derive_seed(seed, "vision-lora", k));
        if (plan.groups.count("llm-lora") != 0 && !model.store.has_group("llm-lora"))
            model.attach_llm_lora(derive_seed(seed, "llm-lora", k));
        if (!cfg.continue_connector && k > 0 && plan.groups.count("connector") != 0)
            reinit_connector(model, derive_seed(seed, "connector", k));

        apply_freeze(model, plan);
        if (cfg.on_stage_start) cfg.on_stage_start(model, k, plan);
        const std::map<std::string, std::vector<double>> before = snapshot_groups(model.store);

        std::vector<TrainingSample> filtered;
        for (std::size_t i = 0; i < data.config().train; ++i) {
            TrainingSample s = data.train_sample(i);
            if (plan.tasks.count(s.task) != 0) filtered.push_back(std::move(s));
        }
        if (filtered.empty())
            throw config_error("stage task filter selects no samples: " + plan.name);

        const std::size_t n_batches = (filtered.size() + cfg.batch_size - 1) / cfg.batch_size;
        const std::size_t epochs = plan.epochs * cfg.epoch_multiplier;
        const std::size_t total_steps = epochs * n_batches;

        AdamW opt;
        opt.reset(model.store);

        StageRecord srec;
        srec.plan = plan;
        srec.total_steps = total_steps;

        std::size_t step = 0;
        for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
            for (std::size_t b = 0; b < n_batches; ++b, ++step) {
                const std::size_t lo = b * cfg.batch_size;
                const std::size_t hi = std::min(filtered.size(), lo + cfg.batch_size);
                const std::vector<TrainingSample> batch(
                    filtered.begin() + static_cast<std::ptrdiff_t>(lo),
                    filtered.begin() + static_cast<std::ptrdiff_t>(hi));
                Graph g;
                Tensor loss = model.batch_loss(g, batch, plan.use_prompt);
                model.store.zero_grad_trainable();
                g.backward(loss);
                const double lr_t = lr_schedule(step, total_steps, plan.lr, cfg.warmup_ratio);
                opt.step(model.store, lr_t);
                const double lv = loss.data()[0];
                if (step == 0) srec.first_loss = lv;
                srec.last_loss = lv;
                report.steps.push_back({k, step, lr_t, lv});
            }
        }
        model.store.drop_all_grads();

        const std::map<std::string, std::vector<double>> after = snapshot_groups(model.store);
        for (const auto& [group, bytes] : after) {
            const auto it = before.find(group);
            if (it == before.end() || it->second != bytes) srec.changed_groups.insert(group);
        }
        if (k < strategy.boundaries.size() && strategy.boundaries[k] == BoundaryAction::merge_lora)
            model.merge_all_lora();

        // the post-boundary model is what later stages and callers see
        if (cfg.eval_each_stage)
            srec.metrics = evaluate(model, data, plan.use_prompt,
                                    strategy.name + ":" + plan.name, seed);
        if (cfg.on_stage_end) cfg.on_stage_end(model, k, srec);
        report.stages.push_back(std::move(srec));
    }

    if (cfg.run_eval)
        report.metrics =
            evaluate(model, data, strategy.stages.back().use_prompt, strategy.name, seed);
    return report;
}

}  // namespace qadapt
