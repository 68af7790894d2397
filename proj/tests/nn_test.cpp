#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "qadapt/nn.hpp"

using namespace qadapt;

namespace {

// deterministic non-random fill so oracle and library share exact weights
void fill_pattern(Tensor& t, int salt) {
    auto& d = t.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
        const int k = static_cast<int>(i) * 7 + salt * 13;
        d[i] = static_cast<double>((k % 19) - 9) / 11.0;
    }
}

// ------------------------ scalar-loop oracle pieces ------------------------
using vec = std::vector<double>;
using mat = std::vector<vec>;

vec o_affine(const mat& w, const vec& b, const vec& x) {
    vec y(w.size(), 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) {
        double acc = b.empty() ? 0.0 : b[i];
        for (std::size_t j = 0; j < x.size(); ++j) acc += w[i][j] * x[j];
        y[i] = acc;
    }
    return y;
}

vec o_layernorm(const vec& x, const vec& gamma, const vec& beta) {
    const double c = static_cast<double>(x.size());
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= c;
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= c;
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    vec y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = (x[i] - mean) * inv * gamma[i] + beta[i];
    return y;
}

double o_gelu(double x) {
    return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

mat tensor_rows(const Tensor& t) {
    mat m(t.rows(), vec(t.cols()));
    for (std::size_t i = 0; i < t.rows(); ++i)
        for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
    return m;
}

vec tensor_vec(const Tensor& t) { return t.data(); }

}  // namespace

TEST_CASE("patch embedding shapes and zero-input identity") {
    Rng rng(1);
    VisualEncoder e8 = VisualEncoder::make(8, 4, 6, 2, 0, rng);
    CHECK(e8.n_tokens == 4);

    Graph g(false);
    Tensor zero_img = Tensor::zeros({8, 8});
    Tensor out = e8.forward(g, zero_img);
    CHECK(out.rows() == 4);
    // zero patches through zero bias leave exactly the positional embedding
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out.data()[i] == e8.pos.data()[i]);

    CHECK_THROWS_AS(VisualEncoder::make(10, 4, 6, 2, 0, rng), config_error);
    CHECK_THROWS_AS(e8.forward(g, Tensor::zeros({12, 12})), shape_error);
}

TEST_CASE("single patch equals hand affine map") {
    Rng rng(2);
    VisualEncoder e = VisualEncoder::make(2, 2, 3, 1, 0, rng);
    fill_pattern(e.embed.weight, 5);
    fill_pattern(e.embed.bias, 6);
    Tensor img = Tensor::from_data({2, 2}, {0.1, 0.7, -0.4, 0.9});
    Graph g(false);
    Tensor out = e.forward(g, img);
    // flattened patch is row-major
    vec patch{0.1, 0.7, -0.4, 0.9};
    vec want = o_affine(tensor_rows(e.embed.weight), tensor_vec(e.embed.bias), patch);
    for (std::size_t j = 0; j < 3; ++j)
        CHECK(std::fabs(out.at(0, j) - (want[j] + e.pos.at(0, j))) < 1e-12);
}

TEST_CASE("patch extraction layout") {
    // 4x4 image, patch 2: grid row-major, in-patch row-major
    std::vector<double> img(16);
    for (std::size_t i = 0; i < 16; ++i) img[i] = static_cast<double>(i);
    Tensor patches = image_to_patches(Tensor::from_data({4, 4}, img), 2);
    CHECK(patches.rows() == 4);
    CHECK(patches.data() == std::vector<double>{0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15});
}

TEST_CASE("attention with a single key copies the value through output map") {
    Rng rng(3);
    AttentionBlock b = AttentionBlock::make("t.attn", 4, 2, AttnMode::cross, rng);
    Graph g(false);
    Tensor q_in = Tensor::from_data({3, 4}, std::vector<double>(12, 0.25));
    Tensor kv = Tensor::from_data({1, 4}, {0.3, -0.2, 0.9, 0.1});
    Tensor out = b.forward(g, q_in, kv);
    Tensor expect = b.o.forward(g, b.v.forward(g, kv));
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 4; ++j) CHECK(std::fabs(out.at(i, j) - expect.at(0, j)) < 1e-12);
}

TEST_CASE("key projection carries no bias parameter") {
    Rng rng(9);
    AttentionBlock b = AttentionBlock::make("h.attn", 4, 2, AttnMode::self_full, rng);
    CHECK(!b.k.bias.defined());
    CHECK(b.q.bias.defined());
    CHECK(b.v.bias.defined());
    CHECK(b.o.bias.defined());
    ParameterStore store;
    b.register_params(store, "g");
    CHECK(store.has("h.attn.k.weight"));
    CHECK(!store.has("h.attn.k.bias"));
    CHECK(store.has("h.attn.q.bias"));
}

TEST_CASE("two-query three-key single-head cross attention matches hand trace") {
    Rng rng(4);
    AttentionBlock b = AttentionBlock::make("h.attn", 2, 1, AttnMode::cross, rng);
    fill_pattern(b.q.weight, 1);
    fill_pattern(b.k.weight, 2);
    fill_pattern(b.v.weight, 3);
    fill_pattern(b.o.weight, 4);
    fill_pattern(b.q.bias, 5);
    fill_pattern(b.v.bias, 7);
    fill_pattern(b.o.bias, 8);
    Tensor q_in = Tensor::from_data({2, 2}, {0.2, -0.5, 1.1, 0.4});
    Tensor kv_in = Tensor::from_data({3, 2}, {0.7, 0.1, -0.3, 0.8, 0.5, -0.9});

    Graph g(false);
    Tensor out = b.forward(g, q_in, kv_in);

    mat wq = tensor_rows(b.q.weight), wk = tensor_rows(b.k.weight), wv = tensor_rows(b.v.weight),
        wo = tensor_rows(b.o.weight);
    vec bq = tensor_vec(b.q.bias), bk(2, 0.0), bv = tensor_vec(b.v.bias),
        bo = tensor_vec(b.o.bias);
    mat qs = {o_affine(wq, bq, {0.2, -0.5}), o_affine(wq, bq, {1.1, 0.4})};
    mat ks = {o_affine(wk, bk, {0.7, 0.1}), o_affine(wk, bk, {-0.3, 0.8}),
              o_affine(wk, bk, {0.5, -0.9})};
    mat vs = {o_affine(wv, bv, {0.7, 0.1}), o_affine(wv, bv, {-0.3, 0.8}),
              o_affine(wv, bv, {0.5, -0.9})};
    for (std::size_t i = 0; i < 2; ++i) {
        vec s(3);
        for (std::size_t j = 0; j < 3; ++j)
            s[j] = (qs[i][0] * ks[j][0] + qs[i][1] * ks[j][1]) / std::sqrt(2.0);
        double denom = 0.0;
        vec p(3);
        for (std::size_t j = 0; j < 3; ++j) denom += std::exp(s[j]);
        for (std::size_t j = 0; j < 3; ++j) p[j] = std::exp(s[j]) / denom;
        vec a{0.0, 0.0};
        for (std::size_t j = 0; j < 3; ++j) {
            a[0] += p[j] * vs[j][0];
            a[1] += p[j] * vs[j][1];
        }
        vec want = o_affine(wo, bo, a);
        CHECK(std::fabs(out.at(i, 0) - want[0]) < 1e-12);
        CHECK(std::fabs(out.at(i, 1) - want[1]) < 1e-12);
    }
}

TEST_CASE("attention weights are row-stochastic") {
    // all-ones values turn each output row into the weight-row sum
    Graph g(false);
    Rng rng(6);
    for (bool causal : {false, true}) {
        std::vector<double> qd(5 * 6), kd(5 * 6);
        for (std::size_t i = 0; i < qd.size(); ++i) {
            qd[i] = rng.normal();
            kd[i] = rng.normal();
        }
        Tensor q = Tensor::from_data({5, 6}, qd);
        Tensor k = Tensor::from_data({5, 6}, kd);
        Tensor ones = Tensor::full({5, 6}, 1.0);
        Tensor out = multihead_attention(g, q, k, ones, 3, causal);
        for (double v : out.data()) CHECK(std::fabs(v - 1.0) < 1e-12);
    }
}

TEST_CASE("non-causal cross attention is key order invariant") {
    Rng rng(7);
    Graph g(false);
    std::vector<double> qd(3 * 4), kd(5 * 4), vd(5 * 4);
    for (auto* p : {&qd, &kd, &vd})
        for (double& x : *p) x = rng.normal();
    Tensor q = Tensor::from_data({3, 4}, qd);
    Tensor k = Tensor::from_data({5, 4}, kd);
    Tensor v = Tensor::from_data({5, 4}, vd);
    Tensor base = multihead_attention(g, q, k, v, 2, false);

    const std::size_t perm[5] = {3, 0, 4, 2, 1};
    std::vector<double> kp(5 * 4), vp(5 * 4);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            kp[i * 4 + j] = kd[perm[i] * 4 + j];
            vp[i * 4 + j] = vd[perm[i] * 4 + j];
        }
    Tensor out = multihead_attention(g, q, Tensor::from_data({5, 4}, kp),
                                     Tensor::from_data({5, 4}, vp), 2, false);
    for (std::size_t i = 0; i < base.size(); ++i)
        CHECK(std::fabs(base.data()[i] - out.data()[i]) < 1e-12);
}

TEST_CASE("self attention rejects distinct sources") {
    Rng rng(8);
    AttentionBlock b = AttentionBlock::make("s.attn", 4, 2, AttnMode::self_full, rng);
    Graph g(false);
    Tensor a = Tensor::zeros({2, 4});
    Tensor c = Tensor::zeros({2, 4});
    CHECK_THROWS_AS(b.forward(g, a, c), shape_error);
    CHECK_NOTHROW(b.forward(g, a, a));
}

TEST_CASE("causal block leaves earlier rows untouched under future perturbation") {
    Rng rng(9);
    TransformerBlock blk = TransformerBlock::make("c.block", 8, 2, true, rng);
    std::vector<double> xd(6 * 8);
    for (double& v : xd) v = rng.normal();
    Graph g(false);
    Tensor base = blk.forward(g, Tensor::from_data({6, 8}, xd));
    auto xd2 = xd;
    for (std::size_t j = 0; j < 8; ++j) xd2[4 * 8 + j] += 3.0 + static_cast<double>(j);
    Tensor pert = blk.forward(g, Tensor::from_data({6, 8}, xd2));
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 8; ++j) CHECK(base.at(i, j) == pert.at(i, j));
    // perturbed row itself must change
    bool changed = false;
    for (std::size_t j = 0; j < 8; ++j) changed = changed || (base.at(4, j) != pert.at(4, j));
    CHECK(changed);
}

TEST_CASE("decoder context limit and empty target") {
    Rng rng(10);
    LanguageDecoder dec = LanguageDecoder::make(5, 4, 1, 1, 8, rng);
    Graph g(false);
    Tensor prefix = Tensor::zeros({3, 4});
    Tensor logits = dec.decode(g, prefix, {});
    CHECK(logits.rows() == 3);
    CHECK(logits.cols() == 5);
    Tensor l2 = dec.decode(g, prefix, {1, 2, 3, 4, 0});
    CHECK(l2.rows() == 8);
    CHECK_THROWS_AS(dec.decode(g, prefix, {1, 2, 3, 4, 0, 1}), shape_error);
    // same call twice gives identical rows
    Tensor l3 = dec.decode(g, prefix, {1, 2, 3, 4, 0});
    CHECK(l2.data() == l3.data());
}

TEST_CASE("micro decoder matches scalar-loop oracle") {
    Rng rng(11);
    LanguageDecoder dec = LanguageDecoder::make(5, 4, 1, 1, 8, rng);
    fill_pattern(dec.tok, 1);
    fill_pattern(dec.pos, 2);
    TransformerBlock& b = dec.blocks[0];
    fill_pattern(b.ln1.gamma, 3);
    fill_pattern(b.ln1.beta, 4);
    fill_pattern(b.attn.q.weight, 5);
    fill_pattern(b.attn.q.bias, 6);
    fill_pattern(b.attn.k.weight, 7);
    fill_pattern(b.attn.v.weight, 9);
    fill_pattern(b.attn.v.bias, 10);
    fill_pattern(b.attn.o.weight, 11);
    fill_pattern(b.attn.o.bias, 12);
    fill_pattern(b.ln2.gamma, 13);
    fill_pattern(b.ln2.beta, 14);
    fill_pattern(b.fc1.weight, 15);
    fill_pattern(b.fc1.bias, 16);
    fill_pattern(b.fc2.weight, 17);
    fill_pattern(b.fc2.bias, 18);
    fill_pattern(dec.head.weight, 19);
    fill_pattern(dec.head.bias, 20);

    Tensor prefix = Tensor::from_data({2, 4}, {0.3, -0.1, 0.8, 0.2, -0.6, 0.5, 0.05, -0.4});
    std::vector<int> targets{1, 3};
    Graph g(false);
    Tensor logits = dec.decode(g, prefix, targets);

    // independent scalar forward
    mat tok = tensor_rows(dec.tok), pos = tensor_rows(dec.pos);
    mat x;
    x.push_back({0.3, -0.1, 0.8, 0.2});
    x.push_back({-0.6, 0.5, 0.05, -0.4});
    x.push_back(tok[1]);
    x.push_back(tok[3]);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) x[i][j] += pos[i][j];

    vec g1 = tensor_vec(b.ln1.gamma), b1 = tensor_vec(b.ln1.beta);
    vec g2 = tensor_vec(b.ln2.gamma), b2 = tensor_vec(b.ln2.beta);
    mat wq = tensor_rows(b.attn.q.weight), wk = tensor_rows(b.attn.k.weight),
        wv = tensor_rows(b.attn.v.weight), wo = tensor_rows(b.attn.o.weight);
    vec bq = tensor_vec(b.attn.q.bias), bk(4, 0.0),
        bv = tensor_vec(b.attn.v.bias), bo = tensor_vec(b.attn.o.bias);
    mat w1 = tensor_rows(b.fc1.weight), w2 = tensor_rows(b.fc2.weight);
    vec c1 = tensor_vec(b.fc1.bias), c2 = tensor_vec(b.fc2.bias);
    mat wh = tensor_rows(dec.head.weight);
    vec bh = tensor_vec(dec.head.bias);

    mat h, q, k, v;
    for (std::size_t i = 0; i < 4; ++i) {
        h.push_back(o_layernorm(x[i], g1, b1));
        q.push_back(o_affine(wq, bq, h.back()));
        k.push_back(o_affine(wk, bk, h.back()));
        v.push_back(o_affine(wv, bv, h.back()));
    }
    mat x1 = x;
    for (std::size_t i = 0; i < 4; ++i) {
        vec s(i + 1);
        double mx = -1e300;
        for (std::size_t j = 0; j <= i; ++j) {
            double acc = 0.0;
            for (std::size_t t = 0; t < 4; ++t) acc += q[i][t] * k[j][t];
            s[j] = acc / 2.0;  // sqrt(head width 4)
            mx = std::max(mx, s[j]);
        }
        double denom = 0.0;
        for (std::size_t j = 0; j <= i; ++j) denom += std::exp(s[j] - mx);
        vec a(4, 0.0);
        for (std::size_t j = 0; j <= i; ++j) {
            const double p = std::exp(s[j] - mx) / denom;
            for (std::size_t t = 0; t < 4; ++t) a[t] += p * v[j][t];
        }
        vec ao = o_affine(wo, bo, a);
        for (std::size_t t = 0; t < 4; ++t) x1[i][t] += ao[t];
    }
    mat x2 = x1;
    for (std::size_t i = 0; i < 4; ++i) {
        vec m = o_layernorm(x1[i], g2, b2);
        vec u = o_affine(w1, c1, m);
        for (double& val : u) val = o_gelu(val);
        vec y = o_affine(w2, c2, u);
        for (std::size_t t = 0; t < 4; ++t) x2[i][t] += y[t];
    }
    for (std::size_t i = 0; i < 4; ++i) {
        vec lg = o_affine(wh, bh, x2[i]);
        for (std::size_t j = 0; j < 5; ++j) CHECK(std::fabs(logits.at(i, j) - lg[j]) < 1e-10);
    }
}

TEST_CASE("greedy generation stops and is deterministic") {
    Rng rng(12);
    LanguageDecoder dec = LanguageDecoder::make(5, 4, 1, 1, 16, rng);
    Tensor prefix = Tensor::from_data({2, 4}, {0.3, -0.1, 0.8, 0.2, -0.6, 0.5, 0.05, -0.4});

    // a +50 head bias on the stop id forces an immediate stop
    dec.head.bias.mutable_data()[0] = 50.0;
    auto out = greedy_generate(dec, prefix, 8, 0);
    CHECK(out == std::vector<int>{0});

    dec.head.bias.mutable_data()[0] = 0.0;
    auto a = greedy_generate(dec, prefix, 6, 0);
    auto b2 = greedy_generate(dec, prefix, 6, 0);
    CHECK(a == b2);
    CHECK(a.size() <= 6);
    CHECK_THROWS_AS(greedy_generate(dec, prefix, 0, 0), config_error);
}

TEST_CASE("decoder head opens as a copy of the token embedding with zero bias") {
    Rng rng(13);
    LanguageDecoder dec = LanguageDecoder::make(7, 4, 1, 1, 16, rng);
    CHECK(dec.head.weight.data() == dec.tok.data());
    CHECK(dec.head.weight.impl() != dec.tok.impl());  // a copy, not an alias
    for (const double b : dec.head.bias.data()) CHECK(b == 0.0);
}

TEST_CASE("greedy tie breaks to lowest token id") {
    Rng rng(13);
    LanguageDecoder dec = LanguageDecoder::make(5, 4, 1, 0, 8, rng);
    // depth 0: logits = head(prefix + pos); identical rows 2 and 3 tie on the
    // all-positive prefix while the zeroed rows stay behind
    for (auto& v : dec.head.weight.mutable_data()) v = 0.0;
    for (auto& v : dec.pos.mutable_data()) v = 0.0;
    for (std::size_t j = 0; j < 4; ++j) {
        dec.head.weight.mutable_data()[2 * 4 + j] = 1.0;
        dec.head.weight.mutable_data()[3 * 4 + j] = 1.0;  // tie between 2 and 3
    }
    Tensor prefix = Tensor::from_data({1, 4}, {0.1, 0.2, 0.3, 0.4});
    auto out = greedy_generate(dec, prefix, 1, 0);
    CHECK(out == std::vector<int>{2});
}

TEST_CASE("lora attach keeps outputs bit-identical and merge matches dense oracle") {
    Rng rng(14);
    ParameterStore store;
    LinearMap m = LinearMap::make("t.map", 3, 5, rng);
    m.register_params(store, "base");
    std::vector<double> xd(4 * 5);
    for (double& v : xd) v = rng.normal();
    Tensor x = Tensor::from_data({4, 5}, xd);
    Graph g(false);
    Tensor before = m.forward(g, x);

    Rng lr(99);
    m.attach_lora(store, "lora", 2, 8.0, lr);
    CHECK(store.has("t.map.lora.A"));
    CHECK(store.has("t.map.lora.B"));
    Tensor after = m.forward(g, x);
    CHECK(std::memcmp(before.data().data(), after.data().data(), before.size() * sizeof(double)) == 0);

    CHECK_THROWS_AS(m.attach_lora(store, "lora", 2, 8.0, lr), config_error);

    // put random values in A and B, compare adapter path to dense W+(α/r)BA
    for (auto& v : m.lora->A.mutable_data()) v = lr.normal();
    for (auto& v : m.lora->B.mutable_data()) v = lr.normal();
    Tensor adapted = m.forward(g, x);

    std::vector<double> dense(3 * 5);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 5; ++j) {
            double acc = m.weight.at(i, j);
            for (std::size_t kk = 0; kk < 2; ++kk)
                acc += (8.0 / 2.0) * m.lora->B.at(i, kk) * m.lora->A.at(kk, j);
            dense[i * 5 + j] = acc;
        }
    Tensor wd = Tensor::from_data({3, 5}, dense);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            double acc = m.bias.data()[j];
            for (std::size_t kk = 0; kk < 5; ++kk) acc += x.at(i, kk) * wd.at(j, kk);
            CHECK(std::fabs(adapted.at(i, j) - acc) < 1e-12);
        }

    // merge: same outputs as the adapter path, adapter gone from the store
    m.merge_lora(store);
    CHECK(!store.has("t.map.lora.A"));
    CHECK(!m.lora.has_value());
    Tensor merged = m.forward(g, x);
    for (std::size_t i = 0; i < merged.size(); ++i)
        CHECK(std::fabs(merged.data()[i] - adapted.data()[i]) < 1e-10);
    CHECK_THROWS_AS(m.merge_lora(store), config_error);
}

TEST_CASE("lora merge right after attach keeps weight bitwise") {
    Rng rng(15);
    ParameterStore store;
    LinearMap m = LinearMap::make("w.map", 4, 4, rng);
    m.register_params(store, "base");
    std::vector<double> w0 = m.weight.data();
    Rng lr(1);
    m.attach_lora(store, "lora", 3, 6.0, lr);
    m.merge_lora(store);
    CHECK(std::memcmp(w0.data(), m.weight.data().data(), w0.size() * sizeof(double)) == 0);
}

TEST_CASE("lora identity-A shift and rank bounds") {
    Rng rng(16);
    ParameterStore store;
    LinearMap m = LinearMap::make("s.map", 3, 3, rng, -1.0, false);
    m.register_params(store, "base");
    Rng lr(2);
    CHECK_THROWS_AS(m.attach_lora(store, "lora", 4, 8.0, lr), config_error);
    m.attach_lora(store, "lora", 3, 8.0, lr);
    // A = identity, B = Δ·(r/α) → output shift is exactly x·Δᵀ
    std::vector<double> delta{0.5, -1.0, 0.25, 2.0, 0.0, -0.75, 1.5, 0.125, -0.5};
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            m.lora->A.mutable_data()[i * 3 + j] = (i == j) ? 1.0 : 0.0;
            m.lora->B.mutable_data()[i * 3 + j] = delta[i * 3 + j] * (3.0 / 8.0);
        }
    Tensor x = Tensor::from_data({2, 3}, {1.0, -0.5, 0.25, 0.0, 2.0, -1.0});
    Graph g(false);
    Tensor base = linear(g, x, m.weight, nullptr);
    Tensor out = m.forward(g, x);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            double shift = 0.0;
            for (std::size_t kk = 0; kk < 3; ++kk) shift += x.at(i, kk) * delta[j * 3 + kk];
            CHECK(std::fabs(out.at(i, j) - base.at(i, j) - shift) < 1e-12);
        }

    // parameter count r·(in+out)
    CHECK(m.lora->A.size() + m.lora->B.size() == 3 * (3 + 3));
}

TEST_CASE("lora gradient flows to A and B while base stays frozen") {
    Rng rng(17);
    ParameterStore store;
    LinearMap m = LinearMap::make("g.map", 3, 4, rng);
    m.register_params(store, "base");
    Rng lr(3);
    m.attach_lora(store, "lora", 2, 4.0, lr);
    // move B off zero so gradients through A are informative
    for (auto& v : m.lora->B.mutable_data()) v = lr.normal(0.0, 0.3);
    store.set_trainable({"lora"});

    Tensor x = Tensor::from_data({2, 4}, {0.5, -0.25, 1.0, 0.75, -0.5, 0.3, -1.0, 0.2});
    auto f = [&](Graph& g) {
        Tensor y = m.forward(g, x);
        std::vector<double> wd(6);
        for (std::size_t i = 0; i < 6; ++i) wd[i] = 0.3 * static_cast<double>(i % 4) - 0.5;
        return sum_all(g, mul(g, gelu(g, y), Tensor::from_data({2, 3}, wd)));
    };
    auto r = grad_check(f, store, 1e-5, 32);
    CHECK(r.max_rel_err < 1e-6);

    // simulate an optimizer: walk every trainable param along its gradient
    std::vector<double> base_w = m.weight.data();
    std::vector<double> base_b = m.bias.data();
    for (int step = 0; step < 3; ++step) {
        store.zero_grad_trainable();
        Graph g;
        Tensor loss = f(g);
        g.backward(loss);
        for (const auto& e : store.entries()) {
            if (!e.tensor.requires_grad()) continue;
            Tensor t = e.tensor;
            for (std::size_t i = 0; i < t.size(); ++i)
                t.mutable_data()[i] -= 0.05 * t.grad_const()[i];
        }
    }
    CHECK(std::memcmp(base_w.data(), m.weight.data().data(), base_w.size() * sizeof(double)) == 0);
    CHECK(std::memcmp(base_b.data(), m.bias.data().data(), base_b.size() * sizeof(double)) == 0);
    // and the adapter actually moved
    bool moved = false;
    for (double v : m.lora->B.data()) moved = moved || (v != 0.0);
    CHECK(moved);
}
