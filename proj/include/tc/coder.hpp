#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <utility>

#include "tc/tensor.hpp"

namespace tc {

struct ModelParams;

enum class CoderKind { transcoder, sae };

std::string_view to_string(CoderKind kind);
CoderKind coder_kind_from_string(std::string_view s);

// A one-hidden-layer ReLU dictionary: z = ReLU(W_enc x + b_enc),
// out = sum_i z_i f_dec_i + b_dec. Feature i owns encoder row i and
// decoder row i (the decoder is stored transposed, one contiguous vector per
// feature).
struct Coder {
    CoderKind kind = CoderKind::transcoder;
    std::size_t layer = 0;
    Matrix W_enc; // [d_features, d_in]
    Vec b_enc;    // [d_features]
    Matrix W_dec; // [d_features, d_out]
    Vec b_dec;    // [d_out]
    float lambda1 = 0.0f;
    std::uint64_t trained_tokens = 0;

    std::size_t d_in() const { return W_enc.cols; }
    std::size_t d_out() const { return W_dec.cols; }
    std::size_t d_features() const { return W_enc.rows; }

    std::span<const float> f_enc(std::size_t i) const { return W_enc.row(i); }
    std::span<const float> f_dec(std::size_t i) const { return W_dec.row(i); }

    static Coder zeros(CoderKind kind, std::size_t layer, std::size_t d_in, std::size_t d_out,
                       std::size_t d_features);

    // Builds a coder from a decoder given column-per-feature ([d_out, d_features]).
    static Coder from_column_decoder(CoderKind kind, std::size_t layer, Matrix w_enc, Vec b_enc,
                                     const Matrix& w_dec_columns, Vec b_dec);

    /// Throws ConfigError on inconsistent shapes, d_features < d_in, or an SAE with d_in != d_out.
    void validate() const;
};

struct CoderOutput {
    Vec z;
    Vec reconstruction;
};

struct CoderLoss {
    double total = 0.0;
    double faithfulness = 0.0; // ||target - reconstruction||^2
    double sparsity = 0.0;     // lambda1 * ||z||_1
};

/// Throws InputError when x.size() != d_in.
CoderOutput coder_forward(const Coder& coder, std::span<const float> x);

// z only; `z` must have d_features entries.
void coder_encode(const Coder& coder, std::span<const float> x, std::span<float> z);
// out = W_dec^T z + b_dec, skipping inactive features.
void coder_decode(const Coder& coder, std::span<const float> z, std::span<float> out);

/// SAEs must be given target == x (UsageError otherwise).
CoderLoss coder_loss(const Coder& coder, std::span<const float> x, std::span<const float> target, float lambda1);

/// (f_enc, f_dec) of feature i by value; InputError when i is out of range.
std::pair<Vec, Vec> feature_vectors(const Coder& coder, std::size_t i);

// A transcoder that reproduces a ReLU MLP exactly: one feature per neuron,
// f_enc = neuron input weights, b_enc = neuron bias, f_dec = neuron output
// weights, b_dec = output bias. ConfigError for GELU models.
Coder exact_copy_transcoder(const ModelParams& params, std::size_t layer);

} // namespace tc
