#include "tc/attribution.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "tc/error.hpp"
#include "tc/kernels.hpp"

namespace tc {

namespace {

bool below(std::size_t lower_layer, const ResidualPoint& upper) {
    return upper.stage == Stage::final || lower_layer < upper.layer;
}

// Attention layer `layer` writes into `upper` when it runs before that point.
bool head_below(std::size_t layer, const ResidualPoint& upper) {
    switch (upper.stage) {
    case Stage::pre: return layer < upper.layer;
    case Stage::mid: return layer <= upper.layer;
    case Stage::final: return true;
    }
    return false;
}

} // namespace

float invariant_factor(std::span<const float> f_dec, std::span<const float> direction) {
    return static_cast<float>(kernels::dot_f64(f_dec, direction));
}

float feature_activation(const ActivationCache& cache, const Coder& coder, std::size_t feature, std::size_t token) {
    if (coder.layer >= cache.layers.size()) throw UsageError("coder layer outside the cached model");
    if (feature >= coder.d_features()) throw InputError("feature index " + std::to_string(feature) + " out of range");
    if (token >= cache.n_tokens()) throw InputError("token index " + std::to_string(token) + " out of range");
    const LayerCache& lc = cache.layers[coder.layer];
    const auto x = coder.kind == CoderKind::transcoder ? lc.mlp_in.row(token) : lc.mlp_out.row(token);
    // the full encode keeps the value bit-identical to what coder_encode produces elsewhere
    Vec z(coder.d_features());
    coder_encode(coder, x, z);
    return z[feature];
}

Attribution pair_attribution(const ActivationCache& cache, const FeatureHandle& lower,
                             std::span<const float> upper_direction, const ResidualPoint& upper,
                             const Coder& lower_coder) {
    if (lower_coder.kind != CoderKind::transcoder) throw UsageError("pair_attribution: lower coder must be a transcoder");
    if (lower_coder.layer != lower.layer) throw UsageError("pair_attribution: coder layer does not match the feature handle");
    if (!below(lower.layer, upper)) {
        throw UsageError("pair_attribution: lower layer " + std::to_string(lower.layer) + " is not below upper layer " +
                         std::to_string(upper.layer));
    }
    if (lower.token != upper.token) throw UsageError("pair_attribution: features must share a token");
    if (upper_direction.size() != lower_coder.d_out()) throw InputError("pair_attribution: direction length mismatch");
    Attribution a;
    a.input_dependent_factor = feature_activation(cache, lower_coder, lower.feature, lower.token);
    a.input_invariant_factor = invariant_factor(lower_coder.f_dec(lower.feature), upper_direction);
    a.value = static_cast<double>(a.input_dependent_factor) * static_cast<double>(a.input_invariant_factor);
    return a;
}

HeadAttribution attention_attribution(const ModelParams& params, const ActivationCache& cache, std::size_t layer,
                                      std::size_t head, std::size_t source, std::size_t dest,
                                      std::span<const float> upper_direction, const ResidualPoint& upper) {
    const ModelConfig& cfg = params.config;
    if (source > dest) {
        throw UsageError("attention_attribution: source " + std::to_string(source) + " is after destination " +
                         std::to_string(dest));
    }
    if (layer >= cfg.n_layers || head >= cfg.n_heads) throw UsageError("attention_attribution: head out of range");
    if (!head_below(layer, upper)) throw UsageError("attention_attribution: head is not below the upper point");
    if (dest >= cache.n_tokens()) throw UsageError("attention_attribution: destination out of range");
    if (upper_direction.size() != cfg.d_model) throw InputError("attention_attribution: direction length mismatch");

    const BlockParams& b = params.blocks[layer];
    const std::size_t dh = cfg.d_head;
    const std::size_t off = head * dh;
    // W_OV^T d = W_V^T (W_O^T d), never forming the d_model x d_model product
    Vec through_o(dh, 0.0f);
    for (std::size_t r = 0; r < cfg.d_model; ++r) {
        if (upper_direction[r] != 0.0f) kernels::axpy(upper_direction[r], b.W_O.row(r).subspan(off, dh), through_o);
    }
    Vec p(cfg.d_model, 0.0f);
    for (std::size_t j = 0; j < dh; ++j) {
        if (through_o[j] != 0.0f) kernels::axpy(through_o[j], b.W_V.row(off + j), p);
    }
    const float score = cache.layers[layer].pattern[head](dest, source);
    kernels::scale(score, p);

    HeadAttribution out;
    out.value = kernels::dot_f64(p, cache.layers[layer].attn_in.row(source));
    out.feature.direction = std::move(p);
    out.feature.origin = HeadSource{layer, head, source, dest};
    out.feature.scale_applied = score;
    return out;
}

PulledBackFeature pullback_through_feature(const FeatureHandle& lower, std::span<const float> upper_direction,
                                           const Coder& lower_coder) {
    if (lower.feature >= lower_coder.d_features()) throw InputError("pullback_through_feature: feature out of range");
    if (upper_direction.size() != lower_coder.d_out()) throw InputError("pullback_through_feature: direction length mismatch");
    const float factor = invariant_factor(lower_coder.f_dec(lower.feature), upper_direction);
    const auto enc = lower_coder.f_enc(lower.feature);
    PulledBackFeature out;
    out.direction.assign(enc.begin(), enc.end());
    kernels::scale(factor, out.direction);
    out.origin = lower;
    return out;
}

LnPullback apply_ln_scale(const PulledBackFeature& feature, const ModelParams& params, const ActivationCache& cache,
                          LnSite site, std::size_t layer, std::size_t token) {
    const LnStat& st = cache.ln(site, layer, token);
    if (!(st.var > 0.0f)) throw UsageError("apply_ln_scale: LayerNorm input has zero variance; scale is undefined");
    const LayerNormParams& ln = site == LnSite::final ? params.ln_final
                                : site == LnSite::attn ? params.blocks.at(layer).ln1
                                                       : params.blocks.at(layer).ln2;
    const std::size_t d = feature.direction.size();
    if (d != ln.gain.size()) throw InputError("apply_ln_scale: direction length mismatch");

    LnPullback out;
    out.feature.origin = feature.origin;
    out.feature.direction.resize(d);
    double mean = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        out.feature.direction[i] = feature.direction[i] * ln.gain[i];
        mean += out.feature.direction[i];
    }
    mean /= static_cast<double>(d);
    const double inv_sigma = 1.0 / static_cast<double>(st.sigma);
    for (auto& v : out.feature.direction) v = static_cast<float>((v - mean) * inv_sigma);
    out.feature.scale_applied = feature.scale_applied * inv_sigma;
    out.constant = kernels::dot_f64(feature.direction, ln.bias);
    return out;
}

std::vector<double> deembedding_scores(std::span<const float> direction, const Matrix& W_E) {
    if (direction.size() != W_E.cols) {
        throw ConfigError("deembed: direction has " + std::to_string(direction.size()) + " entries, embedding width is " +
                          std::to_string(W_E.cols));
    }
    std::vector<double> scores(W_E.rows);
    for (std::size_t v = 0; v < W_E.rows; ++v) scores[v] = kernels::dot_f64(W_E.row(v), direction);
    return scores;
}

std::vector<std::pair<int, double>> top_scores(const std::vector<double>& scores, std::size_t top_k) {
    std::vector<int> ids(scores.size());
    std::iota(ids.begin(), ids.end(), 0);
    const std::size_t k = std::min(top_k, ids.size());
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), [&](int a, int b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    std::vector<std::pair<int, double>> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) out.emplace_back(ids[i], scores[ids[i]]);
    return out;
}

std::vector<std::pair<int, double>> deembed(std::span<const float> direction, const Matrix& W_E, std::size_t top_k) {
    return top_scores(deembedding_scores(direction, W_E), top_k);
}

std::vector<double> dla(const Coder& coder, std::size_t feature, const ActivationCache& cache, std::size_t token,
                        const ModelParams& params) {
    if (coder.d_out() != params.config.d_model) throw ConfigError("dla: coder output width != d_model");
    const float z = feature_activation(cache, coder, feature, token);
    std::vector<double> out(params.config.vocab_size, 0.0);
    if (z == 0.0f) return out;
    // forward through the final LayerNorm linearization: g * (f_dec - mean) / sigma
    const auto dec = coder.f_dec(feature);
    const LnStat& st = cache.ln(LnSite::final, 0, token);
    double mean = 0.0;
    for (float v : dec) mean += v;
    mean /= static_cast<double>(dec.size());
    Vec u(dec.size());
    for (std::size_t i = 0; i < dec.size(); ++i) {
        u[i] = static_cast<float>((dec[i] - mean) / st.sigma) * params.ln_final.gain[i];
    }
    for (std::size_t v = 0; v < out.size(); ++v) out[v] = static_cast<double>(z) * kernels::dot_f64(params.W_U.row(v), u);
    return out;
}

Matrix invariant_matrix(const Coder& lower, const Coder& upper) {
    if (lower.d_out() != upper.d_in()) throw ConfigError("invariant_matrix: lower output width != upper input width");
    Matrix m(upper.d_features(), lower.d_features());
    for (std::size_t j = 0; j < upper.d_features(); ++j)
        for (std::size_t i = 0; i < lower.d_features(); ++i) m(j, i) = invariant_factor(lower.f_dec(i), upper.f_enc(j));
    return m;
}

} // namespace tc
