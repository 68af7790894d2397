#pragma once

// The assembled multimodal model: visual encoder -> optional instruction-
// conditioned prompt modulation -> connector -> language decoder. Every
// parameter lives in one ParameterStore, grouped for staged fine-tuning:
// encoder, connector, decoder, prompt-module, vision-lora, llm-lora.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qadapt/nn.hpp"
#include "qadapt/prompt.hpp"
#include "qadapt/synth.hpp"

namespace qadapt {

struct ModelConfig {
    std::size_t height = 16;
    std::size_t patch = 4;
    std::size_t d_v = 32;  // visual width
    std::size_t d_t = 32;  // decoder width
    std::size_t d = 32;    // generator width
    std::size_t heads = 4;
    std::size_t encoder_depth = 1;
    std::size_t decoder_depth = 2;
    std::size_t generator_depth = 2;
    std::size_t vocab = 60;
    std::size_t max_context = 96;
    std::size_t queries = 8;
    std::size_t m_t_max = 24;  // instruction-position table length
    std::size_t rank = 4;
    double alpha = 8.0;
    GeneratorVariant variant = GeneratorVariant::qformer;

    void validate() const {
        if (patch == 0 || height % patch != 0)
            throw config_error("image side must be divisible by the patch size");
        if (heads == 0 || d_v % heads != 0 || d_t % heads != 0 || d % heads != 0)
            throw config_error("widths must be divisible by the head count");
        if (vocab < 2) throw config_error("vocabulary needs at least two tokens");
        if (decoder_depth == 0) throw config_error("decoder needs at least one block");
        if (max_context == 0 || m_t_max == 0) throw config_error("context lengths must be positive");
        if (rank == 0 || alpha <= 0.0) throw config_error("adapter rank and alpha must be positive");
        if (variant == GeneratorVariant::qformer && queries == 0)
            throw config_error("qformer variant requires at least one query");
    }

    std::size_t n_tokens() const { return (height / patch) * (height / patch); }
};

struct EncodeResult {
    Tensor visual;   // encoder output, pre-modulation [n x d_v]
    Tensor adapted;  // features fed to the connector (modulated or visual)
    Tensor prefix;   // [n + m_t x d_t]
    PromptOutput prompt_out;  // populated only when the prompt path ran
    bool prompt_applied = false;
};

struct SampleLoss {
    Tensor loss;  // scalar, mean NLL per target token
    std::size_t tokens = 0;
};

class QAdaptModel {
  public:
    ModelConfig cfg;
    ParameterStore store;
    VisualEncoder encoder;
    LinearMap connector;
    LanguageDecoder decoder;
    std::optional<PromptModule> prompt;

    // Each component draws from its own seed stream, so adding or removing
    // the prompt module leaves the other components' weights untouched.
    static QAdaptModel make(const ModelConfig& cfg, std::uint64_t seed, bool with_prompt) {
        cfg.validate();
        QAdaptModel m;
        m.cfg = cfg;
        Rng enc_rng(derive_seed(seed, "encoder"));
        m.encoder = VisualEncoder::make(cfg.height, cfg.patch, cfg.d_v, cfg.heads,
                                        cfg.encoder_depth, enc_rng);
        Rng con_rng(derive_seed(seed, "connector"));
        m.connector = LinearMap::make("connector", cfg.d_t, cfg.d_v, con_rng);
        Rng dec_rng(derive_seed(seed, "decoder"));
        m.decoder = LanguageDecoder::make(cfg.vocab, cfg.d_t, cfg.heads, cfg.decoder_depth,
                                          cfg.max_context, dec_rng);
        if (with_prompt) {
            Rng p_rng(derive_seed(seed, "prompt"));
            m.prompt = PromptModule::make(cfg.variant, cfg.queries, cfg.d, cfg.d_t, cfg.d_v,
                                          cfg.m_t_max, cfg.heads, cfg.generator_depth, p_rng);
        }
        m.encoder.register_params(m.store, "encoder");
        m.connector.register_params(m.store, "connector");
        m.decoder.register_params(m.store, "decoder");
        if (m.prompt) m.prompt->register_params(m.store, "prompt-module");
        return m;
    }

    bool has_prompt() const { return prompt.has_value(); }

    EncodeResult build_prefix(Graph& g, const Tensor& image, const std::vector<int>& instruction,
                              bool use_prompt) const {
        EncodeResult r;
        r.visual = encoder.forward(g, image);
        Tensor instr = decoder.embed_tokens(g, instruction);
        if (use_prompt) {
            if (!prompt) throw state_error("prompt path requested but module not constructed");
            r.prompt_out = prompt->forward(g, r.visual, instr);
            r.adapted = r.prompt_out.modulated;
            r.prompt_applied = true;
        } else {
            r.adapted = r.visual;
        }
        Tensor proj = connector.forward(g, r.adapted);
        r.prefix = concat_rows(g, {proj, instr});
        return r;
    }

    // Teacher-forced loss: row k-1+j of the decoded sequence predicts
    // target[j]; prefix rows other than the last carry no loss.
    SampleLoss sample_loss(Graph& g, const TrainingSample& s, bool use_prompt) const {
        if (s.target.empty()) throw data_error("sample has an empty target sequence");
        EncodeResult enc = build_prefix(g, s.image, s.instruction, use_prompt);
        Tensor logits = decoder.decode(g, enc.prefix, s.target);
        const std::size_t k = enc.prefix.rows();
        const std::size_t rows = logits.rows();
        std::vector<int> targets(rows, 0);
        std::vector<bool> mask(rows, false);
        for (std::size_t j = 0; j < s.target.size(); ++j) {
            targets[k - 1 + j] = s.target[j];
            mask[k - 1 + j] = true;
        }
        SampleLoss out;
        out.loss = cross_entropy_next_token(g, logits, targets, mask);
        out.tokens = s.target.size();
        return out;
    }

    // Batch loss is the token-weighted mean of per-sample means, identical
    // to pooling all target tokens into one average.
    Tensor batch_loss(Graph& g, const std::vector<TrainingSample>& batch, bool use_prompt) const {
        if (batch.empty()) throw data_error("empty batch");
        std::vector<Tensor> losses;
        std::vector<double> weights;
        for (const TrainingSample& s : batch) {
            SampleLoss sl = sample_loss(g, s, use_prompt);
            losses.push_back(sl.loss);
            weights.push_back(static_cast<double>(sl.tokens));
        }
        return weighted_mean_scalars(g, losses, weights);
    }

    std::vector<int> answer(const TrainingSample& s, bool use_prompt,
                            std::size_t max_new = 16) const {
        Graph g(false);
        EncodeResult enc = build_prefix(g, s.image, s.instruction, use_prompt);
        return greedy_generate(decoder, enc.prefix, max_new, kStopId);
    }

    void attach_vision_lora(std::uint64_t seed) {
        Rng rng(seed);
        for (TransformerBlock& b : encoder.blocks) attach_block(b, "vision-lora", rng);
    }

    void attach_llm_lora(std::uint64_t seed) {
        Rng rng(seed);
        for (TransformerBlock& b : decoder.blocks) attach_block(b, "llm-lora", rng);
    }

    // Folds every attached adapter into its base weight; returns how many
    // linear maps were merged.
    std::size_t merge_all_lora() {
        std::size_t merged = 0;
        for (TransformerBlock& b : encoder.blocks) merged += merge_block(b);
        for (TransformerBlock& b : decoder.blocks) merged += merge_block(b);
        return merged;
    }

  private:
    void attach_block(TransformerBlock& b, const std::string& group, Rng& rng) {
        for (LinearMap* m : {&b.attn.q, &b.attn.k, &b.attn.v, &b.attn.o, &b.fc1, &b.fc2})
            m->attach_lora(store, group, cfg.rank, cfg.alpha, rng);
    }

    std::size_t merge_block(TransformerBlock& b) {
        std::size_t merged = 0;
        for (LinearMap* m : {&b.attn.q, &b.attn.k, &b.attn.v, &b.attn.o, &b.fc1, &b.fc2})
            if (m->lora) {
                m->merge_lora(store);
                ++merged;
            }
        return merged;
    }
};

}  // namespace qadapt
