#pragma once

// Decoder-only pre-norm transformer with a hookable residual stream. The
// hook site is the residual state after each block (attention + MLP, both
// residual additions applied). Hooks can record that state, replace it
// (patch), or shift it (steer), before the next block runs.
//
// Numerics: parameters and activations are float32; dot products, softmax
// and normalization statistics accumulate in float64. All sampling goes
// through dms::Rng, so outputs are bit-reproducible for a given seed.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dms::model {

struct ModelConfig {
    int n_layers = 8;
    int d_model = 128;
    int n_heads = 4;
    int vocab_size = 120;
    int context_len = 16;
    uint64_t seed = 0x0DDBA11ULL;

    void validate() const;
    int head_dim() const { return d_model / n_heads; }
};

struct LayerWeights {
    std::vector<float> ln1_gain, ln1_bias;
    std::vector<float> wq, bq, wk, bk, wv, bv, wo, bo;  // all [d,d] / [d]
    std::vector<float> ln2_gain, ln2_bias;
    std::vector<float> w1, b1;  // [4d, d], [4d]
    std::vector<float> w2, b2;  // [d, 4d], [d]
};

struct Weights {
    ModelConfig config;
    std::vector<float> tok_emb;  // [vocab, d]
    std::vector<float> pos_emb;  // [context, d]
    std::vector<LayerWeights> layers;
    std::vector<float> lnf_gain, lnf_bias;
    std::vector<float> unembed;  // [vocab, d]

    size_t n_params() const;
    bool all_finite() const;

    // Visits every parameter tensor in a fixed documented order:
    // tok_emb, pos_emb, then per layer (ln1_gain, ln1_bias, wq, bq, wk, bk,
    // wv, bv, wo, bo, ln2_gain, ln2_bias, w1, b1, w2, b2), then lnf_gain,
    // lnf_bias, unembed. `is_matrix` is true for weight matrices and
    // embeddings, false for biases and normalization parameters.
    template <class Fn>
    void visit_tensors(Fn&& fn) {
        fn("tok_emb", tok_emb, true);
        fn("pos_emb", pos_emb, true);
        for (size_t l = 0; l < layers.size(); ++l) {
            LayerWeights& lw = layers[l];
            const std::string p = "layer" + std::to_string(l) + ".";
            fn(p + "ln1_gain", lw.ln1_gain, false);
            fn(p + "ln1_bias", lw.ln1_bias, false);
            fn(p + "wq", lw.wq, true);
            fn(p + "bq", lw.bq, false);
            fn(p + "wk", lw.wk, true);
            fn(p + "bk", lw.bk, false);
            fn(p + "wv", lw.wv, true);
            fn(p + "bv", lw.bv, false);
            fn(p + "wo", lw.wo, true);
            fn(p + "bo", lw.bo, false);
            fn(p + "ln2_gain", lw.ln2_gain, false);
            fn(p + "ln2_bias", lw.ln2_bias, false);
            fn(p + "w1", lw.w1, true);
            fn(p + "b1", lw.b1, false);
            fn(p + "w2", lw.w2, true);
            fn(p + "b2", lw.b2, false);
        }
        fn("lnf_gain", lnf_gain, false);
        fn("lnf_bias", lnf_bias, false);
        fn("unembed", unembed, true);
    }

    template <class Fn>
    void visit_tensors(Fn&& fn) const {
        const_cast<Weights*>(this)->visit_tensors(
            [&](const std::string& name, std::vector<float>& t, bool is_matrix) {
                fn(name, static_cast<const std::vector<float>&>(t), is_matrix);
            });
    }
};

Weights init_weights(const ModelConfig& config);

// Post-block residual vectors, layer-major: [n_layers][seq_len][d_model].
struct ActivationCache {
    int n_layers = 0;
    int seq_len = 0;
    int d_model = 0;
    std::vector<int> tokens;
    std::vector<float> data;

    std::span<const float> at(int layer, int pos) const;
    std::span<float> at_mut(int layer, int pos);
};

enum class PositionScope { LAST_TOKEN, ALL };
enum class HookAction { RECORD, PATCH, STEER, PROBE_THEN_STEER };

struct HookSpec {
    int layer = 0;
    PositionScope scope = PositionScope::ALL;
    HookAction action = HookAction::RECORD;

    // PATCH: replacement rows, row-major [n_rows, d_model]. Scope ALL
    // replaces positions [0, n_rows); LAST_TOKEN replaces the final position
    // with the final row.
    std::vector<float> patch_rows;

    // STEER: residual += magnitude * direction at the scoped positions.
    std::vector<float> direction;
    float magnitude = 0.0f;

    // PROBE_THEN_STEER (LAST_TOKEN only): m = sigmoid(probe_w . phi + probe_b)
    // from the pre-steer state, then residual += alpha * m * direction.
    // forced_m overrides the probe output when set.
    std::vector<float> probe_w;
    float probe_b = 0.0f;
    float alpha = 0.0f;
    std::optional<float> forced_m;
};

HookSpec record_hook(int layer);
HookSpec patch_hook(int layer, const ActivationCache& source, PositionScope scope = PositionScope::ALL);
HookSpec steer_hook(int layer, std::vector<float> direction, float magnitude,
                    PositionScope scope = PositionScope::LAST_TOKEN);

struct ForwardOptions {
    bool record_all_layers = false;   // fill ForwardResult::cache
    bool record_attention = false;    // fill ForwardResult::attn_probs (tests)
};

struct ForwardResult {
    int seq_len = 0;
    int vocab_size = 0;
    std::vector<float> logits;  // [seq_len, vocab_size]
    std::optional<ActivationCache> cache;
    // One entry per PROBE_THEN_STEER hook, in hook order.
    std::vector<double> probe_scores;
    // [layer][head][row, col] row-major T x T, only if record_attention.
    std::vector<std::vector<std::vector<float>>> attn_probs;

    std::span<const float> logits_at(int pos) const;
};

ForwardResult forward(const Weights& weights, std::span<const int> tokens,
                      std::span<const HookSpec> hooks, const ForwardOptions& options = {});

// Probability distribution over the vocabulary from one logit row.
std::vector<double> softmax_f64(std::span<const float> logits, double temperature = 1.0);

// Smallest probability-sorted prefix with cumulative mass >= top_p,
// renormalized; ties in probability break toward the lower token id.
// Returns (token id, renormalized probability) pairs in nucleus order.
std::vector<std::pair<int, double>> nucleus_set(std::span<const double> probs, double top_p);

int argmax_token(std::span<const float> logits);

struct DecodeResult {
    std::vector<int> tokens;        // generated tokens only
    std::vector<double> probe_m;    // per-step probe score (steered decodes)
};

DecodeResult greedy_decode_full(const Weights& weights, std::span<const int> prompt, int max_new,
                                std::span<const HookSpec> hooks = {});
std::vector<int> greedy_decode(const Weights& weights, std::span<const int> prompt, int max_new,
                               std::span<const HookSpec> hooks = {});
std::vector<int> nucleus_sample(const Weights& weights, std::span<const int> prompt, int max_new,
                                double top_p, double temperature, uint64_t rng_seed,
                                std::span<const HookSpec> hooks = {});

// Checkpoint file: magic "DMS1", u32 little-endian metadata length, metadata
// as "key=value\n" lines (model config + training step), then every tensor
// in visit_tensors order as row-major little-endian float32.
void save_checkpoint(const Weights& weights, int64_t step, const std::filesystem::path& path);
struct Checkpoint {
    Weights weights;
    int64_t step = 0;
};
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dms::model
