#pragma once

// Transformer building blocks: linear maps (optionally low-rank adapted),
// layer norm, multi-head attention, pre-norm residual blocks, the patch
// encoder, and the causal language decoder.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "qadapt/rng.hpp"
#include "qadapt/tensor.hpp"

namespace qadapt {

namespace detail {

inline Tensor normal_tensor(Rng& rng, std::vector<std::size_t> dims, double stddev) {
    std::size_t n = 1;
    for (std::size_t d : dims) n *= d;
    std::vector<double> data(n);
    for (double& v : data) v = rng.normal(0.0, stddev);
    return Tensor::from_data(std::move(dims), std::move(data));
}

}  // namespace detail

struct LoraAdapter {
    Tensor A;  // [r x in]
    Tensor B;  // [out x r]
    std::size_t rank = 0;
    double alpha = 0.0;
};

// y = x.W^T + b, optionally plus the low-rank path (alpha/r)((x.A^T).B^T).
struct LinearMap {
    std::string name;
    std::size_t in = 0, out = 0;
    Tensor weight;  // [out x in]
    Tensor bias;    // [out], undefined when bias-free
    std::optional<LoraAdapter> lora;

    // stddev < 0 selects the default 1/sqrt(fan_in)
    static LinearMap make(std::string name, std::size_t out, std::size_t in, Rng& rng,
                          double stddev = -1.0, bool with_bias = true) {
        LinearMap m;
        m.name = std::move(name);
        m.in = in;
        m.out = out;
        const double sd = stddev < 0.0 ? 1.0 / std::sqrt(static_cast<double>(in)) : stddev;
        m.weight = detail::normal_tensor(rng, {out, in}, sd);
        if (with_bias) m.bias = Tensor::zeros({out});
        return m;
    }

    Tensor forward(Graph& g, const Tensor& x) const {
        Tensor base = bias.defined() ? linear(g, x, weight, &bias) : linear(g, x, weight, nullptr);
        if (!lora) return base;
        Tensor xa = linear(g, x, lora->A, nullptr);
        Tensor xab = linear(g, xa, lora->B, nullptr);
        return add(g, base, scale(g, xab, lora->alpha / static_cast<double>(lora->rank)));
    }

    void register_params(ParameterStore& store, const std::string& group) {
        store.add(name + ".weight", weight, group);
        if (bias.defined()) store.add(name + ".bias", bias, group);
    }

    // Adds trainable A (normal std 0.02) and zero B under lora_group; the
    // adapted map equals the base map exactly until B moves off zero.
    void attach_lora(ParameterStore& store, const std::string& lora_group, std::size_t r,
                     double alpha, Rng& rng) {
        if (lora) throw config_error("lora already attached to " + name);
        if (r == 0 || r > std::min(in, out))
            throw config_error("lora rank " + std::to_string(r) + " invalid for " + name);
        LoraAdapter a;
        a.rank = r;
        a.alpha = alpha;
        a.A = detail::normal_tensor(rng, {r, in}, 0.02);
        a.B = Tensor::zeros({out, r});
        lora = std::move(a);
        store.add(name + ".lora.A", lora->A, lora_group);
        store.add(name + ".lora.B", lora->B, lora_group);
    }

    // Folds W += (alpha/r).B.A into the base weight and removes the adapter.
    void merge_lora(ParameterStore& store) {
        if (!lora) throw config_error("no adapter to merge on " + name);
        const double s = lora->alpha / static_cast<double>(lora->rank);
        std::vector<double>& w = weight.mutable_data();
        const std::vector<double>& a = lora->A.data();
        const std::vector<double>& b = lora->B.data();
        const std::size_t r = lora->rank;
        for (std::size_t i = 0; i < out; ++i)
            for (std::size_t k = 0; k < r; ++k) {
                const double bik = s * b[i * r + k];
                for (std::size_t j = 0; j < in; ++j) w[i * in + j] += bik * a[k * in + j];
            }
        store.erase(name + ".lora.A");
        store.erase(name + ".lora.B");
        lora.reset();
    }
};

struct LayerNormParams {
    std::string name;
    Tensor gamma, beta;

    static LayerNormParams make(std::string name, std::size_t width) {
        LayerNormParams p;
        p.name = std::move(name);
        p.gamma = Tensor::full({width}, 1.0);
        p.beta = Tensor::zeros({width});
        return p;
    }

    Tensor forward(Graph& g, const Tensor& x) const { return layer_norm(g, x, gamma, beta); }

    void register_params(ParameterStore& store, const std::string& group) {
        store.add(name + ".gamma", gamma, group);
        store.add(name + ".beta", beta, group);
    }
};

enum class AttnMode { self_full, self_causal, cross };

struct AttentionBlock {
    AttnMode mode = AttnMode::self_full;
    std::size_t heads = 1;
    LinearMap q, k, v, o;

    static AttentionBlock make(const std::string& name, std::size_t width, std::size_t heads,
                               AttnMode mode, Rng& rng) {
        if (width % heads != 0) throw config_error("attention width not divisible by heads: " + name);
        AttentionBlock b;
        b.mode = mode;
        b.heads = heads;
        b.q = LinearMap::make(name + ".q", width, width, rng);
        // a key bias shifts every score in a row equally, which softmax
        // cancels; the parameter would be unidentifiable, so it is omitted
        b.k = LinearMap::make(name + ".k", width, width, rng, -1.0, false);
        b.v = LinearMap::make(name + ".v", width, width, rng);
        b.o = LinearMap::make(name + ".o", width, width, rng);
        return b;
    }

    Tensor forward(Graph& g, const Tensor& q_in, const Tensor& kv_in) const {
        if (mode != AttnMode::cross && q_in.impl() != kv_in.impl())
            throw shape_error("self attention requires a single input source: " + q.name);
        Tensor qp = q.forward(g, q_in);
        Tensor kp = k.forward(g, kv_in);
        Tensor vp = v.forward(g, kv_in);
        Tensor att = multihead_attention(g, qp, kp, vp, heads, mode == AttnMode::self_causal);
        return o.forward(g, att);
    }

    void register_params(ParameterStore& store, const std::string& group) {
        q.register_params(store, group);
        k.register_params(store, group);
        v.register_params(store, group);
        o.register_params(store, group);
    }
};

// Pre-norm residual block: x + attn(ln1(x)), then x + mlp(ln2(x)).
struct TransformerBlock {
    LayerNormParams ln1, ln2;
    AttentionBlock attn;
    LinearMap fc1, fc2;

    static TransformerBlock make(const std::string& name, std::size_t width, std::size_t heads,
                                 bool causal, Rng& rng) {
        TransformerBlock b;
        b.ln1 = LayerNormParams::make(name + ".ln1", width);
        b.attn = AttentionBlock::make(name + ".attn", width, heads,
                                      causal ? AttnMode::self_causal : AttnMode::self_full, rng);
        b.ln2 = LayerNormParams::make(name + ".ln2", width);
        const std::size_t hidden = 4 * width;
        b.fc1 = LinearMap::make(name + ".mlp.fc1", hidden, width, rng);
        b.fc2 = LinearMap::make(name + ".mlp.fc2", width, hidden, rng);
        return b;
    }

    Tensor forward(Graph& g, const Tensor& x) const {
        Tensor h = ln1.forward(g, x);
        Tensor x1 = add(g, x, attn.forward(g, h, h));
        Tensor m = ln2.forward(g, x1);
        return add(g, x1, fc2.forward(g, gelu(g, fc1.forward(g, m))));
    }

    void register_params(ParameterStore& store, const std::string& group) {
        ln1.register_params(store, group);
        attn.register_params(store, group);
        ln2.register_params(store, group);
        fc1.register_params(store, group);
        fc2.register_params(store, group);
    }
};

// Splits a square single-channel image into non-overlapping PxP patches,
// one flattened patch per row, patch grid row-major.
inline Tensor image_to_patches(const Tensor& image, std::size_t patch) {
    const std::size_t h = image.rows();
    if (image.cols() != h) throw shape_error("patch embedding requires a square image");
    if (patch == 0 || h % patch != 0)
        throw shape_error("image side " + std::to_string(h) + " not divisible by patch " +
                          std::to_string(patch));
    const std::size_t grid = h / patch;
    Tensor out = Tensor::zeros({grid * grid, patch * patch});
    for (std::size_t pi = 0; pi < grid; ++pi)
        for (std::size_t pj = 0; pj < grid; ++pj) {
            double* row = out.mutable_data().data() + (pi * grid + pj) * patch * patch;
            for (std::size_t y = 0; y < patch; ++y)
                for (std::size_t x = 0; x < patch; ++x)
                    row[y * patch + x] = image.at(pi * patch + y, pj * patch + x);
        }
    return out;
}

struct VisualEncoder {
    std::size_t height = 0, patch = 0, n_tokens = 0, width = 0;
    LinearMap embed;
    Tensor pos;
    std::vector<TransformerBlock> blocks;

    static VisualEncoder make(std::size_t height, std::size_t patch, std::size_t width,
                              std::size_t heads, std::size_t depth, Rng& rng) {
        if (patch == 0 || height % patch != 0)
            throw config_error("image side not divisible by patch size");
        VisualEncoder e;
        e.height = height;
        e.patch = patch;
        e.width = width;
        const std::size_t grid = height / patch;
        e.n_tokens = grid * grid;
        e.embed = LinearMap::make("encoder.embed", width, patch * patch, rng);
        e.pos = detail::normal_tensor(rng, {e.n_tokens, width}, 0.02);
        for (std::size_t i = 0; i < depth; ++i)
            e.blocks.push_back(
                TransformerBlock::make("encoder.block" + std::to_string(i), width, heads, false, rng));
        return e;
    }

    Tensor forward(Graph& g, const Tensor& image) const {
        Tensor x = add(g, embed.forward(g, image_to_patches(image, patch)), pos);
        for (const TransformerBlock& b : blocks) x = b.forward(g, x);
        return x;
    }

    void register_params(ParameterStore& store, const std::string& group) {
        embed.register_params(store, group);
        store.add("encoder.pos", pos, group);
        for (TransformerBlock& b : blocks) b.register_params(store, group);
    }
};

struct LanguageDecoder {
    std::size_t vocab = 0, width = 0, max_context = 0;
    Tensor tok;  // [V x d_t]
    Tensor pos;  // [max_context x d_t]
    std::vector<TransformerBlock> blocks;
    LinearMap head;

    static LanguageDecoder make(std::size_t vocab, std::size_t width, std::size_t heads,
                                std::size_t depth, std::size_t max_context, Rng& rng) {
        LanguageDecoder d;
        d.vocab = vocab;
        d.width = width;
        d.max_context = max_context;
        d.tok = detail::normal_tensor(rng, {vocab, width}, 0.02);
        d.pos = detail::normal_tensor(rng, {max_context, width}, 0.02);
        for (std::size_t i = 0; i < depth; ++i)
            d.blocks.push_back(
                TransformerBlock::make("decoder.block" + std::to_string(i), width, heads, true, rng));
        // the head starts as a copy of the token embedding with a zero bias,
        // so logits measure hidden states against the same geometry the input
        // embeddings use; an untrained model still emits near-uniform logits
        // (loss starts near log V)
        d.head = LinearMap::make("decoder.head", vocab, width, rng, 0.02, true);
        d.head.weight.mutable_data() = d.tok.data();
        return d;
    }

    Tensor embed_tokens(Graph& g, const std::vector<int>& ids) const {
        return embed_rows(g, tok, ids);
    }

    // Logits over [prefix ‖ embedded targets]; row j sees positions <= j only.
    Tensor decode(Graph& g, const Tensor& prefix, const std::vector<int>& target_ids) const {
        Tensor full =
            target_ids.empty() ? prefix : concat_rows(g, {prefix, embed_rows(g, tok, target_ids)});
        if (full.rows() > max_context)
            throw shape_error("context length " + std::to_string(full.rows()) + " exceeds maximum " +
                              std::to_string(max_context));
        Tensor x = add(g, full, slice_rows(g, pos, 0, full.rows()));
        for (const TransformerBlock& b : blocks) x = b.forward(g, x);
        return head.forward(g, x);
    }

    void register_params(ParameterStore& store, const std::string& group) {
        store.add("decoder.tok", tok, group);
        store.add("decoder.pos", pos, group);
        for (TransformerBlock& b : blocks) b.register_params(store, group);
        head.register_params(store, group);
    }
};

// Greedy decode: repeatedly appends the argmax token (lowest id wins ties)
// until stop_id or max_new tokens. The returned sequence includes stop_id
// when it is generated.
inline std::vector<int> greedy_generate(const LanguageDecoder& dec, const Tensor& prefix,
                                        std::size_t max_new, int stop_id) {
    if (max_new == 0) throw config_error("greedy_generate: max_new must be at least 1");
    std::vector<int> out;
    for (std::size_t step = 0; step < max_new; ++step) {
        Graph g(false);
        Tensor logits = dec.decode(g, prefix, out);
        const std::size_t last = logits.rows() - 1;
        int best = 0;
        double best_v = logits.at(last, 0);
        for (std::size_t j = 1; j < dec.vocab; ++j) {
            if (logits.at(last, j) > best_v) {
                best_v = logits.at(last, j);
                best = static_cast<int>(j);
            }
        }
        out.push_back(best);
        if (best == stop_id) break;
    }
    return out;
}

}  // namespace qadapt
