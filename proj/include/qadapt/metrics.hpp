#pragma once

// Evaluation metrics: answer extraction and accuracy for the answering
// streams, rank and linear correlation between predicted and true quality
// scores, and explanation perplexity.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "qadapt/model.hpp"
#include "qadapt/synth.hpp"

namespace qadapt {

// 1-based ranks; tied values share the mean rank of their span.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
    const std::size_t n = x.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
        const double mean_rank = 0.5 * static_cast<double>(i + 1 + j + 1);
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mean_rank;
        i = j + 1;
    }
    return ranks;
}

inline double plcc(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw data_error("correlation inputs differ in length");
    const std::size_t n = x.size();
    if (n < 2) throw data_error("correlation needs at least two points");
    double mx = 0.0;
    double my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxx = 0.0;
    double syy = 0.0;
    double sxy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx == 0.0 || syy == 0.0) throw data_error("correlation undefined for constant input");
    return sxy / std::sqrt(sxx * syy);
}

inline double srocc(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw data_error("correlation inputs differ in length");
    if (x.size() < 2) throw data_error("correlation needs at least two points");
    return plcc(average_ranks(x), average_ranks(y));
}

// First token drawn from the answer set of the question kind; -1 when the
// generation contains none (the sample then scores as wrong).
inline int extract_answer(const std::vector<int>& generated, QuestionKind kind) {
    const auto valid = [kind](int id) -> bool {
        switch (kind) {
            case QuestionKind::mcq:
                return std::find(kLetterIds.begin(), kLetterIds.end(), id) != kLetterIds.end();
            case QuestionKind::yesno:
                return id == kYesId || id == kNoId;
            case QuestionKind::how:
                return std::find(kAdverbIds.begin(), kAdverbIds.end(), id) != kAdverbIds.end();
            case QuestionKind::none:
                break;
        }
        throw config_error("answer extraction requires a question kind");
    };
    for (int id : generated)
        if (valid(id)) return id;
    return -1;
}

// bad:1 .. excellent:5; 0.0 marks a non-level token (caller drops it).
inline double score_from_level(int token_id) {
    for (std::size_t i = 0; i < kLevelIds.size(); ++i)
        if (kLevelIds[i] == token_id) return static_cast<double>(i + 1);
    return 0.0;
}

// Last level word of a generation anchors the predicted overall quality.
inline int last_level_token(const std::vector<int>& generated) {
    int found = -1;
    for (int id : generated)
        if (score_from_level(id) != 0.0) found = id;
    return found;
}

struct EvalReport {
    std::string strategy;
    std::uint64_t seed = 0;
    double acc_mcq = 0.0;
    double acc_yesno = 0.0;
    double acc_howwhat = 0.0;
    double srocc = 0.0;
    double plcc = 0.0;
    double expl_ppl = 0.0;
    std::size_t n_mcq = 0;
    std::size_t n_yesno = 0;
    std::size_t n_how = 0;
    std::size_t n_expl = 0;
    std::size_t dropped = 0;  // explanation generations without a level word
};

// Greedy-decodes every evaluation stream in index order. Missing or invalid
// answers count as wrong rather than being excluded, so accuracy stays
// comparable across strategies. Explanation generations without a level
// word are dropped from the correlation pair and counted; a degenerate
// (constant or near-empty) prediction set reports zero correlation so an
// untrained model still yields a complete report.
inline EvalReport evaluate(const QAdaptModel& model, const Dataset& data, bool use_prompt,
                           const std::string& strategy = "", std::uint64_t seed = 0) {
    EvalReport r;
    r.strategy = strategy;
    r.seed = seed;
    const DataConfig& cfg = data.config();
    r.n_mcq = cfg.eval_mcq;
    r.n_yesno = cfg.eval_yesno;
    r.n_how = cfg.eval_how;
    r.n_expl = cfg.eval_expl;

    const auto accuracy = [&](std::size_t count, auto&& fetch) -> double {
        std::size_t hits = 0;
        for (std::size_t i = 0; i < count; ++i) {
            const TrainingSample s = fetch(i);
            if (extract_answer(model.answer(s, use_prompt), s.kind) == s.gold_token) ++hits;
        }
        return count == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(count);
    };
    r.acc_mcq = accuracy(cfg.eval_mcq, [&](std::size_t i) { return data.eval_mcq_sample(i); });
    r.acc_yesno =
        accuracy(cfg.eval_yesno, [&](std::size_t i) { return data.eval_yesno_sample(i); });
    r.acc_howwhat = accuracy(cfg.eval_how, [&](std::size_t i) { return data.eval_how_sample(i); });

    std::vector<double> predicted;
    std::vector<double> truth;
    double total_nll = 0.0;
    std::size_t total_tokens = 0;
    for (std::size_t i = 0; i < cfg.eval_expl; ++i) {
        const TrainingSample s = data.eval_expl_sample(i);
        Graph g(false);
        const SampleLoss sl = model.sample_loss(g, s, use_prompt);
        total_nll += sl.loss.data()[0] * static_cast<double>(sl.tokens);
        total_tokens += sl.tokens;
        const int level = last_level_token(model.answer(s, use_prompt));
        if (level < 0) {
            ++r.dropped;
            continue;
        }
        predicted.push_back(score_from_level(level));
        truth.push_back(s.record.score);
    }
    r.expl_ppl =
        total_tokens == 0 ? 1.0 : std::exp(total_nll / static_cast<double>(total_tokens));
    try {
        r.srocc = srocc(predicted, truth);
        r.plcc = plcc(predicted, truth);
    } catch (const data_error&) {
        r.srocc = 0.0;
        r.plcc = 0.0;
    }
    return r;
}

}  // namespace qadapt
