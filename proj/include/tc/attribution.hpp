#pragma once

#include <compare>
#include <span>
#include <utility>
#include <variant>
#include <vector>

#include "tc/coder.hpp"
#include "tc/model.hpp"

namespace tc {

// Feature `feature` of the layer-`layer` transcoder at token `token`.
struct FeatureHandle {
    std::size_t layer = 0;
    std::size_t feature = 0;
    std::size_t token = 0;
    auto operator<=>(const FeatureHandle&) const = default;
};

// Head `head` of layer `layer` moving information from `source` to `dest`.
struct HeadSource {
    std::size_t layer = 0;
    std::size_t head = 0;
    std::size_t source = 0;
    std::size_t dest = 0;
    auto operator<=>(const HeadSource&) const = default;
};

// Where a direction lives: the residual stream before the attention sublayer
// (pre), before the MLP (mid), or after the last block (final).
enum class Stage { pre, mid, final };

struct ResidualPoint {
    std::size_t layer = 0;
    std::size_t token = 0;
    Stage stage = Stage::mid;
};

// A direction such that direction . y is the attribution of any component y
// that is read at its location.
struct PulledBackFeature {
    Vec direction;
    std::variant<std::monostate, FeatureHandle, HeadSource> origin;
    double scale_applied = 1.0; // product of attention scores and 1/sigma factors folded in so far
};

struct Attribution {
    double value = 0.0;                 // exactly input_dependent_factor * input_invariant_factor
    float input_dependent_factor = 0.0f; // lower feature activation z
    float input_invariant_factor = 0.0f; // f_dec . upper direction, weights only
};

// The weights-only dot product used as the invariant factor: accumulated in
// double, rounded once to float so attribution / activation recovers it exactly.
float invariant_factor(std::span<const float> f_dec, std::span<const float> direction);

// Activation of one feature on the cached MLP input (transcoders) or MLP output (SAEs).
float feature_activation(const ActivationCache& cache, const Coder& coder, std::size_t feature, std::size_t token);

/// Attribution of a lower transcoder feature to a direction read
/// at `upper`. UsageError unless lower.layer is strictly below upper's layer
/// (any layer for a final point) and both sit on the same token.
Attribution pair_attribution(const ActivationCache& cache, const FeatureHandle& lower,
                             std::span<const float> upper_direction, const ResidualPoint& upper,
                             const Coder& lower_coder);

struct HeadAttribution {
    double value = 0.0;
    PulledBackFeature feature; // score * W_OV^T upper_direction, in LN1-output space at the source token
};

/// Contribution of source token `source` through head (layer, head) to a
/// direction read at token `dest`. UsageError when source > dest or the head
/// is not below the upper point.
HeadAttribution attention_attribution(const ModelParams& params, const ActivationCache& cache, std::size_t layer,
                                      std::size_t head, std::size_t source, std::size_t dest,
                                      std::span<const float> upper_direction, const ResidualPoint& upper);

/// (upper_direction . f_dec) f_enc, in the coder's input space.
PulledBackFeature pullback_through_feature(const FeatureHandle& lower, std::span<const float> upper_direction,
                                           const Coder& lower_coder);

struct LnPullback {
    PulledBackFeature feature; // lives on the pre-LayerNorm residual stream
    double constant = 0.0;     // direction . ln.bias, the part carried by the LN bias
};

/// Carries a direction from the output of a LayerNorm back to its input using
/// the cached scale: fold the gain, remove the mean component, divide by sigma.
/// UsageError when the site was not cached or its input had zero variance.
LnPullback apply_ln_scale(const PulledBackFeature& feature, const ModelParams& params, const ActivationCache& cache,
                          LnSite site, std::size_t layer, std::size_t token);

// W_E rows dotted with the direction, one score per vocabulary entry.
std::vector<double> deembedding_scores(std::span<const float> direction, const Matrix& W_E);

/// Top-k (token id, score) by descending score, ties by ascending id; k is
/// clamped to the vocabulary size. ConfigError on a dimension mismatch.
std::vector<std::pair<int, double>> deembed(std::span<const float> direction, const Matrix& W_E, std::size_t top_k);

// Ranks a full score vector the same way deembed does.
std::vector<std::pair<int, double>> top_scores(const std::vector<double>& scores, std::size_t top_k);

/// Per-vocabulary logit contribution of feature i at `token`: its activation
/// times W_U applied to the final-LayerNorm linearization of f_dec.
std::vector<double> dla(const Coder& coder, std::size_t feature, const ActivationCache& cache, std::size_t token,
                        const ModelParams& params);

// Matrix of weights-only connections upper.f_enc(j) . lower.f_dec(i), [upper d_features, lower d_features].
Matrix invariant_matrix(const Coder& lower, const Coder& upper);

} // namespace tc
