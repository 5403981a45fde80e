#include "tc/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "tc/coder.hpp"
#include "tc/error.hpp"
#include "tc/kernels.hpp"

namespace tc {

void ModelConfig::validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_head < 1 || d_mlp < 1 || vocab_size < 1 ||
        context_len < 1) {
        throw ConfigError("model config: all counts must be >= 1");
    }
    if (d_model != n_heads * d_head) {
        throw ConfigError("model config: d_model (" + std::to_string(d_model) + ") != n_heads * d_head (" +
                          std::to_string(n_heads * d_head) + ")");
    }
    if (!(ln_epsilon > 0.0f)) throw ConfigError("model config: ln_epsilon must be positive");
}

namespace {

LayerNormParams zero_ln(std::size_t d) { return {Vec(d, 0.0f), Vec(d, 0.0f)}; }

void fill_normal(Matrix& m, std::mt19937_64& rng, float scale) {
    std::normal_distribution<float> dist(0.0f, scale);
    for (float& v : m.data) v = dist(rng);
}

void check_shape(const Matrix& m, std::size_t r, std::size_t c, const char* name) {
    if (m.rows != r || m.cols != c || m.data.size() != r * c) {
        throw ConfigError(std::string("model params: tensor ") + name + " has shape [" + std::to_string(m.rows) +
                          "," + std::to_string(m.cols) + "], expected [" + std::to_string(r) + "," +
                          std::to_string(c) + "]");
    }
}

void check_len(const Vec& v, std::size_t n, const char* name) {
    if (v.size() != n) throw ConfigError(std::string("model params: vector ") + name + " has wrong length");
}

} // namespace

ModelParams ModelParams::zeros(const ModelConfig& cfg) {
    cfg.validate();
    ModelParams p;
    p.config = cfg;
    const std::size_t hd = cfg.n_heads * cfg.d_head;
    p.W_E = Matrix(cfg.vocab_size, cfg.d_model);
    p.W_pos = Matrix(cfg.context_len, cfg.d_model);
    p.blocks.resize(cfg.n_layers);
    for (auto& b : p.blocks) {
        b.ln1 = zero_ln(cfg.d_model);
        b.W_Q = Matrix(hd, cfg.d_model);
        b.W_K = Matrix(hd, cfg.d_model);
        b.W_V = Matrix(hd, cfg.d_model);
        b.W_O = Matrix(cfg.d_model, hd);
        b.ln2 = zero_ln(cfg.d_model);
        b.W_in = Matrix(cfg.d_mlp, cfg.d_model);
        b.b_in = Vec(cfg.d_mlp, 0.0f);
        b.W_out = Matrix(cfg.d_model, cfg.d_mlp);
        b.b_out = Vec(cfg.d_model, 0.0f);
    }
    p.ln_final = zero_ln(cfg.d_model);
    p.W_U = Matrix(cfg.vocab_size, cfg.d_model);
    return p;
}

ModelParams ModelParams::random(const ModelConfig& cfg, std::uint64_t seed, float scale) {
    ModelParams p = zeros(cfg);
    for (auto& b : p.blocks) {
        std::fill(b.ln1.gain.begin(), b.ln1.gain.end(), 1.0f);
        std::fill(b.ln2.gain.begin(), b.ln2.gain.end(), 1.0f);
    }
    std::fill(p.ln_final.gain.begin(), p.ln_final.gain.end(), 1.0f);
    std::mt19937_64 rng(seed);
    fill_normal(p.W_E, rng, scale);
    fill_normal(p.W_pos, rng, scale);
    for (auto& b : p.blocks) {
        fill_normal(b.W_Q, rng, scale);
        fill_normal(b.W_K, rng, scale);
        fill_normal(b.W_V, rng, scale);
        fill_normal(b.W_O, rng, scale);
        fill_normal(b.W_in, rng, scale);
        fill_normal(b.W_out, rng, scale);
    }
    fill_normal(p.W_U, rng, scale);
    return p;
}

Matrix ModelParams::ov_matrix(std::size_t layer, std::size_t head) const {
    if (layer >= config.n_layers || head >= config.n_heads) throw UsageError("ov_matrix: head out of range");
    const BlockParams& b = blocks[layer];
    const std::size_t d = config.d_model;
    const std::size_t off = head * config.d_head;
    Matrix ov(d, d);
    for (std::size_t r = 0; r < d; ++r) {
        for (std::size_t j = 0; j < config.d_head; ++j) {
            const float o = b.W_O(r, off + j);
            if (o != 0.0f) kernels::axpy(o, b.W_V.row(off + j), ov.row(r));
        }
    }
    return ov;
}

void ModelParams::validate() const {
    config.validate();
    const auto& c = config;
    const std::size_t hd = c.n_heads * c.d_head;
    check_shape(W_E, c.vocab_size, c.d_model, "W_E");
    check_shape(W_pos, c.context_len, c.d_model, "W_pos");
    if (blocks.size() != c.n_layers) throw ConfigError("model params: block count != n_layers");
    for (const auto& b : blocks) {
        check_len(b.ln1.gain, c.d_model, "ln1.g");
        check_len(b.ln1.bias, c.d_model, "ln1.b");
        check_shape(b.W_Q, hd, c.d_model, "W_Q");
        check_shape(b.W_K, hd, c.d_model, "W_K");
        check_shape(b.W_V, hd, c.d_model, "W_V");
        check_shape(b.W_O, c.d_model, hd, "W_O");
        check_len(b.ln2.gain, c.d_model, "ln2.g");
        check_len(b.ln2.bias, c.d_model, "ln2.b");
        check_shape(b.W_in, c.d_mlp, c.d_model, "W_in");
        check_len(b.b_in, c.d_mlp, "b_in");
        check_shape(b.W_out, c.d_model, c.d_mlp, "W_out");
        check_len(b.b_out, c.d_model, "b_out");
    }
    check_len(ln_final.gain, c.d_model, "ln_final.g");
    check_len(ln_final.bias, c.d_model, "ln_final.b");
    check_shape(W_U, c.vocab_size, c.d_model, "W_U");
}

namespace {

template <class T, class Self>
std::vector<NamedTensor<T>> collect(Self& p) {
    std::vector<NamedTensor<T>> out;
    auto add = [&out](std::string name, auto& t) {
        if constexpr (requires { t.rows; }) {
            out.push_back({std::move(name), {t.rows, t.cols}, std::span<T>(t.data.data(), t.data.size())});
        } else {
            out.push_back({std::move(name), {t.size()}, std::span<T>(t.data(), t.size())});
        }
    };
    add("embed.W_E", p.W_E);
    add("embed.W_pos", p.W_pos);
    for (std::size_t l = 0; l < p.blocks.size(); ++l) {
        auto& b = p.blocks[l];
        const std::string pre = "blocks." + std::to_string(l) + ".";
        add(pre + "ln1.g", b.ln1.gain);
        add(pre + "ln1.b", b.ln1.bias);
        add(pre + "attn.W_Q", b.W_Q);
        add(pre + "attn.W_K", b.W_K);
        add(pre + "attn.W_V", b.W_V);
        add(pre + "attn.W_O", b.W_O);
        add(pre + "ln2.g", b.ln2.gain);
        add(pre + "ln2.b", b.ln2.bias);
        add(pre + "mlp.W_in", b.W_in);
        add(pre + "mlp.b_in", b.b_in);
        add(pre + "mlp.W_out", b.W_out);
        add(pre + "mlp.b_out", b.b_out);
    }
    add("ln_final.g", p.ln_final.gain);
    add("ln_final.b", p.ln_final.bias);
    add("unembed.W_U", p.W_U);
    return out;
}

} // namespace

std::vector<NamedTensor<float>> ModelParams::named_tensors() { return collect<float>(*this); }

std::vector<NamedTensor<const float>> ModelParams::named_tensors() const { return collect<const float>(*this); }

const LnStat& ActivationCache::ln(LnSite site, std::size_t layer, std::size_t token) const {
    if (token >= n_tokens()) throw UsageError("layer-norm cache: token out of range");
    if (site == LnSite::final) return ln_final[token];
    if (layer >= layers.size()) throw UsageError("layer-norm cache: layer out of range");
    const auto& stats = site == LnSite::attn ? layers[layer].ln1 : layers[layer].ln2;
    if (stats.empty()) throw UsageError("layer-norm cache: site not recorded");
    return stats[token];
}

float gelu(float x) {
    constexpr float k = 0.7978845608028654f; // sqrt(2/pi)
    return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

LnStat layer_norm(std::span<const float> x, const LayerNormParams& ln, float eps, std::span<float> out) {
    const std::size_t d = x.size();
    double sum = 0.0;
    for (float v : x) sum += v;
    const double mean = sum / static_cast<double>(d);
    double sq = 0.0;
    for (float v : x) sq += (v - mean) * (v - mean);
    const double var = sq / static_cast<double>(d);
    const double sigma = std::sqrt(var + static_cast<double>(eps));
    for (std::size_t i = 0; i < d; ++i) {
        out[i] = static_cast<float>((x[i] - mean) / sigma) * ln.gain[i] + ln.bias[i];
    }
    return {static_cast<float>(mean), static_cast<float>(var), static_cast<float>(sigma)};
}

namespace {

void check_tokens(const ModelConfig& cfg, std::span<const int> tokens) {
    if (tokens.empty()) throw InputError("forward: empty token sequence");
    if (tokens.size() > cfg.context_len) {
        throw InputError("forward: sequence length " + std::to_string(tokens.size()) + " exceeds context_len " +
                         std::to_string(cfg.context_len));
    }
    for (std::size_t t = 0; t < tokens.size(); ++t) {
        if (tokens[t] < 0 || static_cast<std::size_t>(tokens[t]) >= cfg.vocab_size) {
            throw InputError("forward: token id " + std::to_string(tokens[t]) + " at position " + std::to_string(t) +
                             " out of range");
        }
    }
}

void attention(const ModelParams& params, std::size_t layer, LayerCache& lc) {
    const ModelConfig& cfg = params.config;
    const BlockParams& b = params.blocks[layer];
    const std::size_t T = lc.x_pre.rows;
    const std::size_t d = cfg.d_model;
    const std::size_t dh = cfg.d_head;
    const std::size_t hd = cfg.n_heads * dh;

    lc.attn_in = Matrix(T, d);
    lc.ln1.resize(T);
    for (std::size_t t = 0; t < T; ++t) lc.ln1[t] = layer_norm(lc.x_pre.row(t), b.ln1, cfg.ln_epsilon, lc.attn_in.row(t));

    Matrix q(T, hd), k(T, hd), v(T, hd);
    for (std::size_t t = 0; t < T; ++t) {
        kernels::gemv(b.W_Q, lc.attn_in.row(t), q.row(t));
        kernels::gemv(b.W_K, lc.attn_in.row(t), k.row(t));
        kernels::gemv(b.W_V, lc.attn_in.row(t), v.row(t));
    }

    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
    lc.pattern.assign(cfg.n_heads, Matrix(T, T));
    lc.head_out.assign(cfg.n_heads, Matrix(T, d));
    Vec mixed(dh);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const std::size_t off = h * dh;
        Matrix& pat = lc.pattern[h];
        for (std::size_t t = 0; t < T; ++t) {
            auto row = pat.row(t);
            float mx = -INFINITY;
            for (std::size_t s = 0; s <= t; ++s) {
                row[s] = kernels::dot(q.row(t).subspan(off, dh), k.row(s).subspan(off, dh)) * inv_sqrt;
                mx = std::max(mx, row[s]);
            }
            double z = 0.0;
            for (std::size_t s = 0; s <= t; ++s) {
                row[s] = std::exp(row[s] - mx);
                z += row[s];
            }
            for (std::size_t s = 0; s <= t; ++s) row[s] = static_cast<float>(row[s] / z);

            std::fill(mixed.begin(), mixed.end(), 0.0f);
            for (std::size_t s = 0; s <= t; ++s) kernels::axpy(row[s], v.row(s).subspan(off, dh), mixed);
            auto out = lc.head_out[h].row(t);
            for (std::size_t r = 0; r < d; ++r) out[r] = kernels::dot(b.W_O.row(r).subspan(off, dh), mixed);
        }
    }

    lc.x_mid = lc.x_pre;
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        for (std::size_t t = 0; t < T; ++t) kernels::axpy(1.0f, lc.head_out[h].row(t), lc.x_mid.row(t));
    }
}

bool keeps(const std::vector<std::uint8_t>& keep, std::size_t i) { return keep.empty() || keep[i] != 0; }

void mlp(const ModelParams& params, std::size_t layer, LayerCache& lc, const MlpIntervention& iv) {
    const ModelConfig& cfg = params.config;
    const BlockParams& b = params.blocks[layer];
    const std::size_t T = lc.x_mid.rows;
    const std::size_t d = cfg.d_model;

    lc.mlp_in = Matrix(T, d);
    lc.ln2.resize(T);
    for (std::size_t t = 0; t < T; ++t) lc.ln2[t] = layer_norm(lc.x_mid.row(t), b.ln2, cfg.ln_epsilon, lc.mlp_in.row(t));

    lc.mlp_out = Matrix(T, d);
    using K = MlpIntervention::Kind;
    switch (iv.kind) {
    case K::none:
    case K::neuron_mask: {
        lc.mlp_hidden = Matrix(T, cfg.d_mlp);
        for (std::size_t t = 0; t < T; ++t) {
            auto hid = lc.mlp_hidden.row(t);
            kernels::gemv(b.W_in, lc.mlp_in.row(t), hid);
            for (std::size_t n = 0; n < cfg.d_mlp; ++n) {
                const float pre = hid[n] + b.b_in[n];
                float a = cfg.activation == Activation::relu ? (pre > 0.0f ? pre : 0.0f) : gelu(pre);
                if (iv.kind == K::neuron_mask && !keeps(iv.keep, n)) a = 0.0f;
                hid[n] = a;
            }
            kernels::gemv(b.W_out, hid, lc.mlp_out.row(t));
            kernels::axpy(1.0f, b.b_out, lc.mlp_out.row(t));
        }
        break;
    }
    case K::coder: {
        const Coder& c = *iv.coder;
        if (c.kind == CoderKind::sae) {
            // an SAE replaces the MLP output with its reconstruction of that output
            MlpIntervention plain;
            mlp(params, layer, lc, plain);
        }
        Vec z(c.d_features());
        Vec source(d);
        for (std::size_t t = 0; t < T; ++t) {
            if (c.kind == CoderKind::sae) {
                std::copy(lc.mlp_out.row(t).begin(), lc.mlp_out.row(t).end(), source.begin());
            } else {
                std::copy(lc.mlp_in.row(t).begin(), lc.mlp_in.row(t).end(), source.begin());
            }
            coder_encode(c, source, z);
            if (!iv.keep.empty()) {
                for (std::size_t i = 0; i < z.size(); ++i)
                    if (!iv.keep[i]) z[i] = 0.0f;
            }
            coder_decode(c, z, lc.mlp_out.row(t));
        }
        break;
    }
    case K::mean:
        for (std::size_t t = 0; t < T; ++t) std::copy(iv.mean.begin(), iv.mean.end(), lc.mlp_out.row(t).begin());
        break;
    case K::zero:
        break;
    }
}

void check_interventions(const ModelParams& params, std::span<const MlpIntervention> ivs) {
    const ModelConfig& cfg = params.config;
    if (!ivs.empty() && ivs.size() != cfg.n_layers) throw ConfigError("interventions: need one entry per layer");
    for (std::size_t l = 0; l < ivs.size(); ++l) {
        const auto& iv = ivs[l];
        using K = MlpIntervention::Kind;
        if (iv.kind == K::coder) {
            if (iv.coder == nullptr) throw ConfigError("interventions: null coder");
            iv.coder->validate();
            if (iv.coder->d_in() != cfg.d_model || iv.coder->d_out() != cfg.d_model) {
                throw ConfigError("replacement coder for layer " + std::to_string(l) + " has dims " +
                                  std::to_string(iv.coder->d_in()) + "->" + std::to_string(iv.coder->d_out()) +
                                  ", model needs " + std::to_string(cfg.d_model));
            }
            if (!iv.keep.empty() && iv.keep.size() != iv.coder->d_features())
                throw ConfigError("interventions: feature mask length mismatch");
        }
        if (iv.kind == K::mean && iv.mean.size() != cfg.d_model)
            throw ConfigError("mean ablation for layer " + std::to_string(l) + " has wrong length");
        if (iv.kind == K::neuron_mask && !iv.keep.empty() && iv.keep.size() != cfg.d_mlp)
            throw ConfigError("interventions: neuron mask length mismatch");
    }
}

} // namespace

ActivationCache run_with_interventions(const ModelParams& params, std::span<const int> tokens,
                                       std::span<const MlpIntervention> interventions) {
    const ModelConfig& cfg = params.config;
    check_tokens(cfg, tokens);
    check_interventions(params, interventions);
    const std::size_t T = tokens.size();
    const std::size_t d = cfg.d_model;

    ActivationCache cache;
    cache.tokens.assign(tokens.begin(), tokens.end());
    cache.layers.resize(cfg.n_layers);

    Matrix resid(T, d);
    for (std::size_t t = 0; t < T; ++t) {
        auto r = resid.row(t);
        const auto e = params.W_E.row(static_cast<std::size_t>(tokens[t]));
        const auto p = params.W_pos.row(t);
        for (std::size_t i = 0; i < d; ++i) r[i] = e[i] + p[i];
    }

    const MlpIntervention none{};
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        LayerCache& lc = cache.layers[l];
        lc.x_pre = std::move(resid);
        attention(params, l, lc);
        mlp(params, l, lc, interventions.empty() ? none : interventions[l]);
        resid = lc.x_mid;
        for (std::size_t t = 0; t < T; ++t) kernels::axpy(1.0f, lc.mlp_out.row(t), resid.row(t));
    }
    cache.x_final = std::move(resid);

    cache.ln_final.resize(T);
    cache.final_normed = Matrix(T, d);
    cache.logits = Matrix(T, cfg.vocab_size);
    for (std::size_t t = 0; t < T; ++t) {
        cache.ln_final[t] = layer_norm(cache.x_final.row(t), params.ln_final, cfg.ln_epsilon, cache.final_normed.row(t));
        kernels::gemv(params.W_U, cache.final_normed.row(t), cache.logits.row(t));
    }
    return cache;
}

ActivationCache forward_with_cache(const ModelParams& params, std::span<const int> tokens) {
    return run_with_interventions(params, tokens, {});
}

ActivationCache run_with_replacements(const ModelParams& params, std::span<const int> tokens,
                                      const std::map<std::size_t, const Coder*>& replacements,
                                      const std::map<std::size_t, Ablation>& ablations) {
    const std::size_t L = params.config.n_layers;
    std::vector<MlpIntervention> ivs(L);
    for (const auto& [layer, coder] : replacements) {
        if (layer >= L) throw ConfigError("replacement layer out of range");
        ivs[layer].kind = MlpIntervention::Kind::coder;
        ivs[layer].coder = coder;
    }
    for (const auto& [layer, ab] : ablations) {
        if (layer >= L) throw ConfigError("ablation layer out of range");
        if (replacements.contains(layer)) {
            throw ConfigError("layer " + std::to_string(layer) + " is both replaced and ablated");
        }
        if (ab.mode == Ablation::Mode::zero) {
            ivs[layer].kind = MlpIntervention::Kind::zero;
        } else {
            ivs[layer].kind = MlpIntervention::Kind::mean;
            ivs[layer].mean = ab.mean;
        }
    }
    return run_with_interventions(params, tokens, ivs);
}

std::pair<double, std::size_t> cross_entropy_sum(const Matrix& logits, std::span<const int> tokens,
                                                 std::optional<int> pad_id) {
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
        const int target = tokens[t + 1];
        if (pad_id && target == *pad_id) continue;
        const auto row = logits.row(t);
        const float mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (float v : row) z += std::exp(static_cast<double>(v - mx));
        total += std::log(z) - static_cast<double>(row[static_cast<std::size_t>(target)] - mx);
        ++count;
    }
    return {total, count};
}

} // namespace tc
