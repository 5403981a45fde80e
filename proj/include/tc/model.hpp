#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tc/tensor.hpp"

namespace tc {

struct Coder;

enum class Activation { gelu, relu };

struct ModelConfig {
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t d_model = 64;
    std::size_t d_head = 16;
    std::size_t d_mlp = 256;
    std::size_t vocab_size = 128;
    std::size_t context_len = 32;
    float ln_epsilon = 1e-5f;
    Activation activation = Activation::gelu;

    /// Throws ConfigError unless d_model == n_heads * d_head and every count is >= 1.
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

struct LayerNormParams {
    Vec gain;
    Vec bias;
};

// One transformer block. Attention projections stack the heads: rows
// [h*d_head, (h+1)*d_head) of W_Q/W_K/W_V and the same column range of W_O
// belong to head h. Attention has no bias terms.
struct BlockParams {
    LayerNormParams ln1;
    Matrix W_Q; // [n_heads*d_head, d_model]
    Matrix W_K;
    Matrix W_V;
    Matrix W_O; // [d_model, n_heads*d_head]
    LayerNormParams ln2;
    Matrix W_in; // [d_mlp, d_model], row n is neuron n's input weights
    Vec b_in;
    Matrix W_out; // [d_model, d_mlp]
    Vec b_out;
};

template <class T>
struct NamedTensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::span<T> data;
};

struct ModelParams {
    ModelConfig config;
    Matrix W_E;   // [vocab, d_model]
    Matrix W_pos; // [context_len, d_model]
    std::vector<BlockParams> blocks;
    LayerNormParams ln_final;
    Matrix W_U; // [vocab, d_model], logits = W_U * ln_final(x)

    // Every tensor zero, LN gains included; shaped for gradients and optimizer state.
    static ModelParams zeros(const ModelConfig& cfg);
    // Gaussian init with std `scale` for matrices, unit LN gains, zero biases.
    static ModelParams random(const ModelConfig& cfg, std::uint64_t seed, float scale = 0.1f);

    /// W_O^h W_V^h, the d_model x d_model OV circuit of one head.
    Matrix ov_matrix(std::size_t layer, std::size_t head) const;

    void validate() const;

    // Every tensor in a fixed order; used by checkpointing and the optimizer.
    std::vector<NamedTensor<float>> named_tensors();
    std::vector<NamedTensor<const float>> named_tensors() const;
};

struct LnStat {
    float mean = 0.0f;
    float var = 0.0f;
    float sigma = 1.0f; // sqrt(var + eps): ||x - mean|| / ||(x - mean) / sigma||
};

enum class LnSite { attn, mlp, final };

struct LayerCache {
    Matrix x_pre;   // [T, d_model] residual before attention
    Matrix x_mid;   // [T, d_model] residual before the MLP
    Matrix attn_in; // LN1(x_pre)
    std::vector<LnStat> ln1;
    std::vector<Matrix> pattern;  // per head [T, T]; row t is softmax over s <= t
    std::vector<Matrix> head_out; // per head [T, d_model]
    Matrix mlp_in;                // LN2(x_mid)
    std::vector<LnStat> ln2;
    Matrix mlp_hidden; // [T, d_mlp] post-nonlinearity neurons (empty if the MLP was not run)
    Matrix mlp_out;    // [T, d_model] what was actually added to the residual
};

struct ActivationCache {
    std::vector<int> tokens;
    std::vector<LayerCache> layers;
    Matrix x_final; // residual after the last block
    std::vector<LnStat> ln_final;
    Matrix final_normed;
    Matrix logits; // [T, vocab]

    std::size_t n_tokens() const { return tokens.size(); }
    /// Throws UsageError for an out-of-range site.
    const LnStat& ln(LnSite site, std::size_t layer, std::size_t token) const;
};

// What to do with one layer's MLP during a forward pass.
struct MlpIntervention {
    enum class Kind { none, coder, mean, zero, neuron_mask };
    Kind kind = Kind::none;
    const Coder* coder = nullptr;  // Kind::coder
    Vec mean;                      // Kind::mean
    std::vector<std::uint8_t> keep; // coder features or MLP neurons kept; empty keeps all
};

struct Ablation {
    enum class Mode { mean, zero };
    Mode mode = Mode::zero;
    Vec mean;
};

float gelu(float x);

/// Plain forward pass recording every intermediate. Throws InputError on an
/// empty sequence, an out-of-range token or a sequence longer than context_len.
ActivationCache forward_with_cache(const ModelParams& params, std::span<const int> tokens);

ActivationCache run_with_replacements(const ModelParams& params, std::span<const int> tokens,
                                      const std::map<std::size_t, const Coder*>& replacements,
                                      const std::map<std::size_t, Ablation>& ablations);

// General form; interventions has one entry per layer (or is empty).
ActivationCache run_with_interventions(const ModelParams& params, std::span<const int> tokens,
                                       std::span<const MlpIntervention> interventions);

// LayerNorm of one vector; returns the statistics used.
LnStat layer_norm(std::span<const float> x, const LayerNormParams& ln, float eps, std::span<float> out);

// Mean next-token cross entropy (nats) over positions 0..T-2; targets equal
// to `pad_id` are skipped. Returns {sum, count}.
std::pair<double, std::size_t> cross_entropy_sum(const Matrix& logits, std::span<const int> tokens,
                                                 std::optional<int> pad_id = std::nullopt);

} // namespace tc
