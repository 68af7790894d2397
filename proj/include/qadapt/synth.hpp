#pragma once

// Synthetic explainable image-quality data: procedurally distorted
// checkerboard-gradient images with exact attribute severities, rendered
// into two task formats over a fixed 60-word vocabulary. Every sample is a
// pure function of (data seed, stream name, index).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "qadapt/rng.hpp"
#include "qadapt/tensor.hpp"

namespace qadapt {

constexpr int kStopId = 0;

class Vocabulary {
  public:
    static const std::vector<std::string>& words() {
        static const std::vector<std::string> w = {
            "<stop>", "<pad>", "noise", "blur", "darkness", "contrast", "none", "slight",
            "moderate", "severe", "bad", "poor", "fair", "good", "excellent", "A", "B", "C", "D",
            "yes", "no", "describe", "the", "overall", "quality", "of", "this", "image", "which",
            "attribute", "is", "most", "option", "in", "how", "level", "score", "rate", "assess",
            "grade", "what", "answer", "choose", "question", "photo", "picture", "looks", "very",
            "quite", "clean", "sharp", "bright", "dark", "grainy", "fuzzy", "faded", "washed",
            "degraded", "distortion", "artifact"};
        return w;
    }

    static std::size_t size() { return words().size(); }

    static int id(const std::string& word) {
        const auto& w = words();
        for (std::size_t i = 0; i < w.size(); ++i)
            if (w[i] == word) return static_cast<int>(i);
        throw data_error("word not in vocabulary: " + word);
    }

    static const std::string& word(int id) {
        if (id < 0 || static_cast<std::size_t>(id) >= words().size())
            throw data_error("token id out of vocabulary: " + std::to_string(id));
        return words()[static_cast<std::size_t>(id)];
    }
};

// attribute order used throughout: noise, blur, darkness, contrast
constexpr std::array<int, 4> kAttrIds = {2, 3, 4, 5};
// the same attributes sorted by word (blur, contrast, darkness, noise),
// as indices into the array above; breaks severity ties
constexpr std::array<int, 4> kAttrLexOrder = {1, 3, 2, 0};
constexpr std::array<int, 4> kAdverbIds = {6, 7, 8, 9};      // none slight moderate severe
constexpr std::array<int, 5> kLevelIds = {10, 11, 12, 13, 14};  // bad..excellent
constexpr std::array<int, 4> kLetterIds = {15, 16, 17, 18};  // A B C D
constexpr int kYesId = 19, kNoId = 20;

// severity bins at 0.25 boundaries, boundary values fall to the lower bin
inline int severity_adverb(double s) {
    if (s < 0.0 || s > 1.0) throw data_error("severity out of range: " + std::to_string(s));
    if (s <= 0.25) return kAdverbIds[0];
    if (s <= 0.5) return kAdverbIds[1];
    if (s <= 0.75) return kAdverbIds[2];
    return kAdverbIds[3];
}

// five uniform score bins, closed on the left
inline int level_from_score(double score) {
    if (score < 0.0 || score > 1.0) throw data_error("score out of range: " + std::to_string(score));
    if (score < 0.2) return kLevelIds[0];
    if (score < 0.4) return kLevelIds[1];
    if (score < 0.6) return kLevelIds[2];
    if (score < 0.8) return kLevelIds[3];
    return kLevelIds[4];
}

struct AttributeRecord {
    std::array<double, 4> severities{};  // noise, blur, darkness, contrast
    double score = 1.0;
    int level = kLevelIds[4];

    static AttributeRecord make(const std::array<double, 4>& severities) {
        AttributeRecord r;
        r.severities = severities;
        double mean = 0.0;
        for (double s : severities) {
            if (s < 0.0 || s > 1.0)
                throw data_error("severity out of range: " + std::to_string(s));
            mean += s;
        }
        mean /= 4.0;
        r.score = 1.0 - mean;
        r.level = level_from_score(r.score);
        return r;
    }

    // most severe attribute index; ties go to the alphabetically first word
    int argmax_attr() const {
        int best = -1;
        double best_v = -1.0;
        for (int lex : kAttrLexOrder) {
            if (severities[static_cast<std::size_t>(lex)] > best_v) {
                best_v = severities[static_cast<std::size_t>(lex)];
                best = lex;
            }
        }
        return best;
    }
};

// Deterministic distorted image: checkerboard-plus-gradient base, then
// noise, blur, darkness, contrast-loss in that order, clamped to [0,1].
inline Tensor render_image(std::uint64_t seed, const std::array<double, 4>& severities,
                           std::size_t height) {
    for (double s : severities)
        if (s < 0.0 || s > 1.0) throw data_error("severity out of range: " + std::to_string(s));
    if (height < 2) throw shape_error("image side must be at least 2");
    const std::size_t h = height;
    std::vector<double> px(h * h);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < h; ++x) {
            const double checker = static_cast<double>(((y / 4) + (x / 4)) % 2);
            const double grad = static_cast<double>(x + y) / static_cast<double>(2 * (h - 1));
            px[y * h + x] = 0.15 + 0.5 * checker + 0.3 * grad;
        }

    Rng rng(seed);
    const double s_noise = severities[0];
    for (double& p : px) p += s_noise * rng.uniform(-1.0, 1.0);

    // radius scaled by severity, capped below the patch size so blur softens
    // structure instead of erasing it; fractional radii blend the two nearest
    // box filters so every severity level stays identifiable
    auto box = [&](long radius) {
        std::vector<double> blurred(h * h);
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < h; ++x) {
                double acc = 0.0;
                std::size_t count = 0;
                const long y0 = std::max<long>(0, static_cast<long>(y) - radius);
                const long y1 = std::min<long>(static_cast<long>(h) - 1, static_cast<long>(y) + radius);
                const long x0 = std::max<long>(0, static_cast<long>(x) - radius);
                const long x1 = std::min<long>(static_cast<long>(h) - 1, static_cast<long>(x) + radius);
                for (long yy = y0; yy <= y1; ++yy)
                    for (long xx = x0; xx <= x1; ++xx) {
                        acc += px[static_cast<std::size_t>(yy) * h + static_cast<std::size_t>(xx)];
                        ++count;
                    }
                blurred[y * h + x] = acc / static_cast<double>(count);
            }
        return blurred;
    };
    const double full = 2.0 * severities[1];
    const long r0 = static_cast<long>(full);
    const double fblend = full - static_cast<double>(r0);
    if (fblend > 0.0) {
        const std::vector<double> lo = r0 > 0 ? box(r0) : px;
        const std::vector<double> hi = box(r0 + 1);
        for (std::size_t i = 0; i < px.size(); ++i)
            px[i] = (1.0 - fblend) * lo[i] + fblend * hi[i];
    } else if (r0 > 0) {
        px = box(r0);
    }

    const double dim = 1.0 - severities[2];
    for (double& p : px) p *= dim;

    const double s_con = severities[3];
    for (double& p : px) p += s_con * (0.5 - p);

    for (double& p : px) p = std::clamp(p, 0.0, 1.0);
    return Tensor::from_data({h, h}, std::move(px));
}

enum class TaskKind { explanation, answering };
enum class QuestionKind { none, mcq, yesno, how };

struct TrainingSample {
    std::uint64_t seed = 0;
    std::uint64_t index = 0;
    TaskKind task = TaskKind::explanation;
    QuestionKind kind = QuestionKind::none;
    Tensor image;
    std::vector<int> instruction;
    std::vector<int> target;
    AttributeRecord record;
    int gold_token = -1;
    int asked_attr = -1;         // queried attribute for yes-no / how questions
    std::array<int, 4> options{};  // MCQ option order as attribute indices
};

inline std::vector<int> ids(std::initializer_list<const char*> words) {
    std::vector<int> out;
    for (const char* w : words) out.push_back(Vocabulary::id(w));
    return out;
}

inline std::vector<int> explanation_instruction() {
    return ids({"describe", "the", "overall", "quality", "of", "this", "image"});
}

// enumeration order for explanations: most severe attribute first, ties by
// the alphabetical word order, so the opening token names the dominant
// problem and agrees with the multiple-choice gold rule
inline std::array<int, 4> severity_order(const AttributeRecord& r) {
    std::array<int, 4> order = kAttrLexOrder;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return r.severities[static_cast<std::size_t>(a)] >
               r.severities[static_cast<std::size_t>(b)];
    });
    return order;
}

inline std::vector<int> explanation_target(const AttributeRecord& r) {
    std::vector<int> t;
    for (const int a : severity_order(r)) {
        t.push_back(kAttrIds[static_cast<std::size_t>(a)]);
        t.push_back(severity_adverb(r.severities[static_cast<std::size_t>(a)]));
    }
    t.push_back(Vocabulary::id("overall"));
    t.push_back(Vocabulary::id("quality"));
    t.push_back(r.level);
    t.push_back(kStopId);
    return t;
}

inline TrainingSample make_explanation_sample(const AttributeRecord& r, Tensor image) {
    TrainingSample s;
    s.task = TaskKind::explanation;
    s.kind = QuestionKind::none;
    s.image = std::move(image);
    s.record = r;
    s.instruction = explanation_instruction();
    s.target = explanation_target(r);
    s.gold_token = r.level;
    return s;
}

inline std::vector<int> mcq_instruction(const std::array<int, 4>& option_attrs) {
    std::vector<int> t = ids({"which", "attribute", "is", "most", "severe"});
    for (std::size_t i = 0; i < 4; ++i) {
        t.push_back(Vocabulary::id("option"));
        t.push_back(kLetterIds[i]);
        t.push_back(kAttrIds[static_cast<std::size_t>(option_attrs[i])]);
    }
    return t;
}

// kind mcq: option order drawn from rng; yesno/how: queried attribute drawn
inline TrainingSample make_answering_sample(const AttributeRecord& r, Tensor image,
                                            QuestionKind kind, Rng& rng) {
    TrainingSample s;
    s.task = TaskKind::answering;
    s.kind = kind;
    s.image = std::move(image);
    s.record = r;
    switch (kind) {
        case QuestionKind::mcq: {
            std::vector<int> perm{0, 1, 2, 3};
            rng.shuffle(perm);
            std::copy(perm.begin(), perm.end(), s.options.begin());
            const int gold_attr = r.argmax_attr();
            int letter_pos = 0;
            for (int i = 0; i < 4; ++i)
                if (s.options[static_cast<std::size_t>(i)] == gold_attr) letter_pos = i;
            s.instruction = mcq_instruction(s.options);
            s.gold_token = kLetterIds[static_cast<std::size_t>(letter_pos)];
            s.target = {s.gold_token, kAttrIds[static_cast<std::size_t>(gold_attr)], kStopId};
            break;
        }
        case QuestionKind::yesno: {
            const int attr = static_cast<int>(rng.below(4));
            s.asked_attr = attr;
            s.instruction = ids({"is", "the"});
            s.instruction.push_back(kAttrIds[static_cast<std::size_t>(attr)]);
            for (int w : ids({"severe", "in", "this", "image"})) s.instruction.push_back(w);
            s.gold_token = r.severities[static_cast<std::size_t>(attr)] >= 0.5 ? kYesId : kNoId;
            s.target = {s.gold_token, kStopId};
            break;
        }
        case QuestionKind::how: {
            const int attr = static_cast<int>(rng.below(4));
            s.asked_attr = attr;
            s.instruction = ids({"how", "severe", "is", "the"});
            s.instruction.push_back(kAttrIds[static_cast<std::size_t>(attr)]);
            s.gold_token = severity_adverb(r.severities[static_cast<std::size_t>(attr)]);
            s.target = {s.gold_token, kStopId};
            break;
        }
        case QuestionKind::none:
            throw config_error("answering sample requires a question kind");
    }
    return s;
}

struct DataConfig {
    std::size_t train = 2000;
    std::size_t eval_mcq = 500;
    std::size_t eval_expl = 200;
    std::size_t eval_yesno = 200;
    std::size_t eval_how = 200;
    double fraction = 0.7;  // share of answering samples in the train stream
    std::uint64_t data_seed = 1234;
    std::size_t height = 16;
};

// Deterministic sample streams. The train stream interleaves tasks so that
// exactly floor(size * fraction) answering samples appear, spread evenly;
// answering samples cycle mcq -> yesno -> how.
class Dataset {
  public:
    explicit Dataset(DataConfig cfg) : cfg_(cfg) {
        if (cfg.fraction < 0.0 || cfg.fraction > 1.0)
            throw config_error("answering fraction must lie in [0,1]");
        frac_ppm_ = static_cast<std::uint64_t>(std::llround(cfg.fraction * 1e6));
    }

    const DataConfig& config() const { return cfg_; }

    std::size_t answering_before(std::uint64_t index) const {
        return static_cast<std::size_t>(index * frac_ppm_ / 1000000);
    }

    bool is_answering(std::uint64_t index) const {
        return answering_before(index + 1) > answering_before(index);
    }

    TrainingSample train_sample(std::uint64_t index) const {
        if (index >= cfg_.train) throw data_error("train index out of range");
        if (!is_answering(index)) return sample_at("train", index, TaskKind::explanation,
                                                   QuestionKind::none);
        const std::size_t ordinal = answering_before(index);
        static constexpr std::array<QuestionKind, 3> cycle = {QuestionKind::mcq, QuestionKind::yesno,
                                                              QuestionKind::how};
        return sample_at("train", index, TaskKind::answering, cycle[ordinal % 3]);
    }

    TrainingSample eval_mcq_sample(std::uint64_t i) const {
        if (i >= cfg_.eval_mcq) throw data_error("eval-mcq index out of range");
        return sample_at("eval-mcq", i, TaskKind::answering, QuestionKind::mcq);
    }
    TrainingSample eval_expl_sample(std::uint64_t i) const {
        if (i >= cfg_.eval_expl) throw data_error("eval-expl index out of range");
        return sample_at("eval-expl", i, TaskKind::explanation, QuestionKind::none);
    }
    TrainingSample eval_yesno_sample(std::uint64_t i) const {
        if (i >= cfg_.eval_yesno) throw data_error("eval-yesno index out of range");
        return sample_at("eval-yesno", i, TaskKind::answering, QuestionKind::yesno);
    }
    TrainingSample eval_how_sample(std::uint64_t i) const {
        if (i >= cfg_.eval_how) throw data_error("eval-how index out of range");
        return sample_at("eval-how", i, TaskKind::answering, QuestionKind::how);
    }

  private:
    // Severities are four distinct levels on the eighth grid {0, 1/8, .., 1}.
    // One attribute dominates by at least three eighths, so ranking questions
    // have a unique answer that stays recoverable from the rendered image.
    TrainingSample sample_at(const char* stream, std::uint64_t index, TaskKind task,
                             QuestionKind kind) const {
        const std::uint64_t seed = derive_seed(cfg_.data_seed, stream, index);
        Rng rng(seed);
        const std::size_t dom = rng.below(4);
        const int dom_e = 5 + static_cast<int>(rng.below(4));
        std::array<int, 6> pool{};
        const std::size_t psz = static_cast<std::size_t>(dom_e - 2);
        for (std::size_t i = 0; i < psz; ++i) pool[i] = static_cast<int>(i);
        std::array<double, 4> sev{};
        sev[dom] = static_cast<double>(dom_e) / 8.0;
        std::size_t k = 0;
        for (std::size_t a = 0; a < 4; ++a) {
            if (a == dom) continue;
            const std::size_t j = k + rng.below(psz - k);
            std::swap(pool[k], pool[j]);
            sev[a] = static_cast<double>(pool[k]) / 8.0;
            ++k;
        }
        AttributeRecord rec = AttributeRecord::make(sev);
        Tensor image = render_image(derive_seed(seed, "px"), sev, cfg_.height);
        TrainingSample s = task == TaskKind::explanation
                               ? make_explanation_sample(rec, std::move(image))
                               : make_answering_sample(rec, std::move(image), kind, rng);
        s.seed = seed;
        s.index = index;
        return s;
    }

    DataConfig cfg_;
    std::uint64_t frac_ppm_ = 0;
};

}  // namespace qadapt
