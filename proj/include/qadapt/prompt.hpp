#pragma once

// Instruction-adaptive visual prompt: a query-based generator that fuses
// instruction and visual features into a compact representation, and a
// prompter that projects it back onto the visual tokens through single-head
// cross attention with sigmoid-gated convex fusion.

#include <cmath>
#include <string>
#include <vector>

#include "qadapt/nn.hpp"
#include "qadapt/rng.hpp"
#include "qadapt/tensor.hpp"

namespace qadapt {

enum class GeneratorVariant { qformer, bert };

inline GeneratorVariant parse_variant(const std::string& s) {
    if (s == "qformer") return GeneratorVariant::qformer;
    if (s == "bert") return GeneratorVariant::bert;
    throw config_error("unknown generator variant: " + s);
}

// One generator block: bidirectional self-attention over the whole sequence,
// cross-attention of the designated rows to the projected visual tokens,
// then MLP. All three use pre-norm residuals.
struct GeneratorBlock {
    LayerNormParams ln1, ln2, ln3;
    AttentionBlock self_attn, cross_attn;
    LinearMap fc1, fc2;

    static GeneratorBlock make(const std::string& name, std::size_t width, std::size_t heads,
                               Rng& rng) {
        GeneratorBlock b;
        b.ln1 = LayerNormParams::make(name + ".ln1", width);
        b.self_attn = AttentionBlock::make(name + ".self", width, heads, AttnMode::self_full, rng);
        b.ln2 = LayerNormParams::make(name + ".ln2", width);
        b.cross_attn = AttentionBlock::make(name + ".cross", width, heads, AttnMode::cross, rng);
        b.ln3 = LayerNormParams::make(name + ".ln3", width);
        b.fc1 = LinearMap::make(name + ".mlp.fc1", 4 * width, width, rng);
        b.fc2 = LinearMap::make(name + ".mlp.fc2", width, 4 * width, rng);
        return b;
    }

    // cross_rows: how many leading rows cross-attend to the visual tokens
    Tensor forward(Graph& g, const Tensor& seq_in, const Tensor& visual,
                   std::size_t cross_rows) const {
        Tensor h = ln1.forward(g, seq_in);
        Tensor seq = add(g, seq_in, self_attn.forward(g, h, h));
        if (cross_rows == seq.rows()) {
            seq = add(g, seq, cross_attn.forward(g, ln2.forward(g, seq), visual));
        } else {
            Tensor qr = slice_rows(g, seq, 0, cross_rows);
            Tensor tr = slice_rows(g, seq, cross_rows, seq.rows());
            Tensor qr2 = add(g, qr, cross_attn.forward(g, ln2.forward(g, qr), visual));
            seq = concat_rows(g, {qr2, tr});
        }
        return add(g, seq, fc2.forward(g, gelu(g, fc1.forward(g, ln3.forward(g, seq)))));
    }

    void register_params(ParameterStore& store, const std::string& group) {
        ln1.register_params(store, group);
        self_attn.register_params(store, group);
        ln2.register_params(store, group);
        cross_attn.register_params(store, group);
        ln3.register_params(store, group);
        fc1.register_params(store, group);
        fc2.register_params(store, group);
    }
};

struct VTGenerator {
    GeneratorVariant variant = GeneratorVariant::qformer;
    std::size_t n_queries = 0, width = 0, m_t_max = 0;
    Tensor queries;  // [m x d], absent in the bert variant
    Tensor tpos;     // [m_t_max x d_t], instruction-position embedding
    LinearMap ft;    // d_t -> d
    LinearMap fv;    // d_v -> d
    std::vector<GeneratorBlock> blocks;

    static VTGenerator make(GeneratorVariant variant, std::size_t n_queries, std::size_t width,
                            std::size_t d_t, std::size_t d_v, std::size_t m_t_max,
                            std::size_t heads, std::size_t depth, Rng& rng) {
        VTGenerator gen;
        gen.variant = variant;
        gen.n_queries = variant == GeneratorVariant::qformer ? n_queries : 0;
        gen.width = width;
        gen.m_t_max = m_t_max;
        if (variant == GeneratorVariant::qformer) {
            if (n_queries == 0) throw config_error("qformer variant requires at least one query");
            gen.queries = detail::normal_tensor(rng, {n_queries, width}, 0.02);
        }
        gen.tpos = detail::normal_tensor(rng, {m_t_max, d_t}, 0.02);
        gen.ft = LinearMap::make("prompt.ft", width, d_t, rng);
        gen.fv = LinearMap::make("prompt.fv", width, d_v, rng);
        for (std::size_t i = 0; i < depth; ++i)
            gen.blocks.push_back(
                GeneratorBlock::make("prompt.gen.block" + std::to_string(i), width, heads, rng));
        return gen;
    }

    // instr_embeds: raw token embeddings [m_t x d_t]; visual: [n x d_v].
    // Returns the enriched representation: query rows (qformer) or all
    // instruction rows (bert), width d.
    Tensor forward(Graph& g, const Tensor& instr_embeds, const Tensor& visual) const {
        if (instr_embeds.rows() > m_t_max)
            throw shape_error("instruction length " + std::to_string(instr_embeds.rows()) +
                              " exceeds prompt position table " + std::to_string(m_t_max));
        Tensor t_in = add(g, instr_embeds, slice_rows(g, tpos, 0, instr_embeds.rows()));
        Tensor t = ft.forward(g, t_in);
        Tensor v = fv.forward(g, visual);
        if (variant == GeneratorVariant::qformer) {
            Tensor seq = concat_rows(g, {queries, t});
            for (const GeneratorBlock& b : blocks) seq = b.forward(g, seq, v, n_queries);
            return n_queries == seq.rows() ? seq : slice_rows(g, seq, 0, n_queries);
        }
        Tensor seq = t;
        for (const GeneratorBlock& b : blocks) seq = b.forward(g, seq, v, seq.rows());
        return seq;
    }

    void register_params(ParameterStore& store, const std::string& group) {
        if (variant == GeneratorVariant::qformer) store.add("prompt.queries", queries, group);
        store.add("prompt.tpos", tpos, group);
        ft.register_params(store, group);
        fv.register_params(store, group);
        for (GeneratorBlock& b : blocks) b.register_params(store, group);
    }
};

struct PromptOutput {
    Tensor modulated;     // F_tv, the gated fusion result [n x d_v]
    Tensor sigma;         // gate weights, every entry in (0,1)
    Tensor intermediate;  // cross-attention output before fusion [n x d_v]
    Tensor generated;     // generator output [m x d]
};

struct TVPrompter {
    LinearMap proj;  // d -> d_v
    AttentionBlock ca;
    LinearMap gate;  // 2*d_v -> d_v, bias +2 so fusion starts near the raw visual features

    static TVPrompter make(std::size_t d, std::size_t d_v, Rng& rng) {
        TVPrompter p;
        p.proj = LinearMap::make("prompt.proj", d_v, d, rng);
        p.ca = AttentionBlock::make("prompt.ca", d_v, 1, AttnMode::cross, rng);
        p.gate = LinearMap::make("prompt.gate", d_v, 2 * d_v, rng);
        for (double& v : p.gate.bias.mutable_data()) v = 2.0;
        return p;
    }

    PromptOutput forward(Graph& g, const Tensor& visual, const Tensor& generated) const {
        Tensor kv = proj.forward(g, generated);
        Tensor intermediate = ca.forward(g, visual, kv);
        Tensor sigma = sigmoid(g, gate.forward(g, concat_cols(g, intermediate, visual)));
        PromptOutput out;
        out.modulated = gated_mix(g, sigma, intermediate, visual);
        out.sigma = sigma;
        out.intermediate = intermediate;
        out.generated = generated;
        return out;
    }

    void register_params(ParameterStore& store, const std::string& group) {
        proj.register_params(store, group);
        ca.register_params(store, group);
        gate.register_params(store, group);
    }
};

struct PromptModule {
    VTGenerator generator;
    TVPrompter prompter;

    static PromptModule make(GeneratorVariant variant, std::size_t n_queries, std::size_t d,
                             std::size_t d_t, std::size_t d_v, std::size_t m_t_max,
                             std::size_t heads, std::size_t depth, Rng& rng) {
        PromptModule m;
        m.generator =
            VTGenerator::make(variant, n_queries, d, d_t, d_v, m_t_max, heads, depth, rng);
        m.prompter = TVPrompter::make(d, d_v, rng);
        return m;
    }

    PromptOutput forward(Graph& g, const Tensor& visual, const Tensor& instr_embeds) const {
        return prompter.forward(g, visual, generator.forward(g, instr_embeds, visual));
    }

    void register_params(ParameterStore& store, const std::string& group) {
        generator.register_params(store, group);
        prompter.register_params(store, group);
    }
};

// Per-token modulation magnitude on the patch grid: L2 norm of the change
// per visual token, min-max normalized to [0,1]. A constant map (including
// the unmodulated case) normalizes to all zeros.
inline Tensor prompt_map(const Tensor& original, const Tensor& modulated) {
    if (original.dims() != modulated.dims()) throw shape_error("prompt_map: shape mismatch");
    const std::size_t n = original.rows(), w = original.cols();
    const std::size_t side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(n))));
    if (side * side != n) throw shape_error("prompt_map: token count is not a perfect square");
    std::vector<double> norms(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < w; ++j) {
            const double dchan = modulated.at(i, j) - original.at(i, j);
            acc += dchan * dchan;
        }
        norms[i] = std::sqrt(acc);
    }
    double lo = norms[0], hi = norms[0];
    for (double v : norms) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    // a map is constant when its spread is negligible against the feature
    // scale, so a near-passthrough gate renders black instead of stretched
    // floating-point noise
    double scale = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < w; ++j) acc += original.at(i, j) * original.at(i, j);
        scale = std::max(scale, std::sqrt(acc));
    }
    if (hi - lo <= 1e-6 * scale || hi - lo <= 0.0) return Tensor::zeros({side, side});
    for (double& v : norms) v = (v - lo) / (hi - lo);
    return Tensor::from_data({side, side}, std::move(norms));
}

// Per-token L2 norms of a feature map on the patch grid, min-max normalized
// the same way (used for the original-feature reference image).
inline Tensor feature_norm_map(const Tensor& features) {
    Tensor zero = Tensor::zeros(features.dims());
    return prompt_map(zero, features);
}

}  // namespace qadapt
