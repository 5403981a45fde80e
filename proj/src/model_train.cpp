#include "tc/model_train.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "tc/error.hpp"
#include "tc/kernels.hpp"
#include "tc/parallel.hpp"

namespace tc {

namespace {

constexpr std::size_t kGradChunks = 8;

// dx for y = g * (x - mean) / sigma + b; accumulates dg, db and adds dx to `dx`.
void layer_norm_backward(std::span<const float> x, const LnStat& st, const LayerNormParams& ln, std::span<const float> dy,
                         LayerNormParams& dln, std::span<float> dx) {
    const std::size_t d = x.size();
    thread_local Vec xhat, dxhat;
    xhat.resize(d);
    dxhat.resize(d);
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        xhat[i] = (x[i] - st.mean) / st.sigma;
        dln.gain[i] += dy[i] * xhat[i];
        dln.bias[i] += dy[i];
        dxhat[i] = dy[i] * ln.gain[i];
        mean_dxhat += dxhat[i];
        mean_dxhat_xhat += static_cast<double>(dxhat[i]) * xhat[i];
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) {
        dx[i] += static_cast<float>((dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat) / st.sigma);
    }
}

float gelu_grad(float x) {
    constexpr float k = 0.7978845608028654f;
    const float inner = k * (x + 0.044715f * x * x * x);
    const float th = std::tanh(inner);
    const float dinner = k * (1.0f + 3.0f * 0.044715f * x * x);
    return 0.5f * (1.0f + th) + 0.5f * x * (1.0f - th * th) * dinner;
}

// outer-product accumulate: M.row(r) += a[r] * b
void add_outer(Matrix& m, std::span<const float> a, std::span<const float> b) {
    for (std::size_t r = 0; r < a.size(); ++r)
        if (a[r] != 0.0f) kernels::axpy(a[r], b, m.row(r));
}

// Returns the summed (not averaged) loss over predicted positions; gradients
// are scaled by `inv_count`.
double sequence_backward(const ModelParams& params, std::span<const int> tokens, float inv_count, ModelParams& grad) {
    const ModelConfig& cfg = params.config;
    const ActivationCache cache = forward_with_cache(params, tokens);
    const std::size_t T = tokens.size();
    const std::size_t d = cfg.d_model;
    const std::size_t dh = cfg.d_head;
    const std::size_t hd = cfg.n_heads * dh;

    double loss = 0.0;
    Matrix dresid(T, d);
    {
        Vec dlogit(cfg.vocab_size);
        Vec dnorm(d);
        for (std::size_t t = 0; t + 1 < T; ++t) {
            const auto row = cache.logits.row(t);
            const float mx = *std::max_element(row.begin(), row.end());
            double z = 0.0;
            for (std::size_t v = 0; v < cfg.vocab_size; ++v) z += std::exp(static_cast<double>(row[v] - mx));
            const auto target = static_cast<std::size_t>(tokens[t + 1]);
            loss += std::log(z) - (row[target] - mx);
            for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
                dlogit[v] = static_cast<float>(std::exp(static_cast<double>(row[v] - mx)) / z) * inv_count;
            }
            dlogit[target] -= inv_count;
            add_outer(grad.W_U, dlogit, cache.final_normed.row(t));
            std::fill(dnorm.begin(), dnorm.end(), 0.0f);
            kernels::gemv_t_acc(params.W_U, dlogit, dnorm);
            layer_norm_backward(cache.x_final.row(t), cache.ln_final[t], params.ln_final, dnorm, grad.ln_final, dresid.row(t));
        }
    }

    Vec dm(d), dhid(cfg.d_mlp), pre(cfg.d_mlp), dmixed(hd), dattn(d);
    Matrix q(T, hd), k(T, hd), v(T, hd), mixed(T, hd), dq(T, hd), dk(T, hd), dv(T, hd);
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));

    for (std::size_t li = cfg.n_layers; li-- > 0;) {
        const BlockParams& b = params.blocks[li];
        BlockParams& g = grad.blocks[li];
        const LayerCache& lc = cache.layers[li];

        // MLP: x_pre[l+1] = x_mid + W_out act(W_in LN2(x_mid) + b_in) + b_out
        Matrix dxmid = dresid;
        for (std::size_t t = 0; t < T; ++t) {
            const auto dout = dresid.row(t);
            add_outer(g.W_out, dout, lc.mlp_hidden.row(t));
            kernels::axpy(1.0f, dout, g.b_out);
            std::fill(dhid.begin(), dhid.end(), 0.0f);
            kernels::gemv_t_acc(b.W_out, dout, dhid);
            kernels::gemv(b.W_in, lc.mlp_in.row(t), pre);
            for (std::size_t n = 0; n < cfg.d_mlp; ++n) {
                const float p = pre[n] + b.b_in[n];
                dhid[n] *= cfg.activation == Activation::relu ? (p > 0.0f ? 1.0f : 0.0f) : gelu_grad(p);
            }
            add_outer(g.W_in, dhid, lc.mlp_in.row(t));
            kernels::axpy(1.0f, dhid, g.b_in);
            std::fill(dm.begin(), dm.end(), 0.0f);
            kernels::gemv_t_acc(b.W_in, dhid, dm);
            layer_norm_backward(lc.x_mid.row(t), lc.ln2[t], b.ln2, dm, g.ln2, dxmid.row(t));
        }

        // Attention: x_mid = x_pre + sum_h W_O^h sum_s p(t,s) W_V^h LN1(x_pre_s)
        for (std::size_t t = 0; t < T; ++t) {
            kernels::gemv(b.W_Q, lc.attn_in.row(t), q.row(t));
            kernels::gemv(b.W_K, lc.attn_in.row(t), k.row(t));
            kernels::gemv(b.W_V, lc.attn_in.row(t), v.row(t));
        }
        std::fill(mixed.data.begin(), mixed.data.end(), 0.0f);
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            const std::size_t off = h * dh;
            for (std::size_t t = 0; t < T; ++t)
                for (std::size_t s = 0; s <= t; ++s)
                    kernels::axpy(lc.pattern[h](t, s), v.row(s).subspan(off, dh), mixed.row(t).subspan(off, dh));
        }
        std::fill(dq.data.begin(), dq.data.end(), 0.0f);
        std::fill(dk.data.begin(), dk.data.end(), 0.0f);
        std::fill(dv.data.begin(), dv.data.end(), 0.0f);
        Vec dp(T);
        for (std::size_t t = 0; t < T; ++t) {
            const auto dout = dxmid.row(t);
            add_outer(g.W_O, dout, mixed.row(t));
            std::fill(dmixed.begin(), dmixed.end(), 0.0f);
            kernels::gemv_t_acc(b.W_O, dout, dmixed);
            for (std::size_t h = 0; h < cfg.n_heads; ++h) {
                const std::size_t off = h * dh;
                const auto dmh = std::span<const float>(dmixed).subspan(off, dh);
                const auto prow = lc.pattern[h].row(t);
                double weighted = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    dp[s] = kernels::dot(dmh, v.row(s).subspan(off, dh));
                    weighted += static_cast<double>(prow[s]) * dp[s];
                    kernels::axpy(prow[s], dmh, dv.row(s).subspan(off, dh));
                }
                for (std::size_t s = 0; s <= t; ++s) {
                    const float ds = prow[s] * (dp[s] - static_cast<float>(weighted)) * inv_sqrt;
                    if (ds == 0.0f) continue;
                    kernels::axpy(ds, k.row(s).subspan(off, dh), dq.row(t).subspan(off, dh));
                    kernels::axpy(ds, q.row(t).subspan(off, dh), dk.row(s).subspan(off, dh));
                }
            }
        }
        Matrix dxpre = dxmid;
        for (std::size_t t = 0; t < T; ++t) {
            add_outer(g.W_Q, dq.row(t), lc.attn_in.row(t));
            add_outer(g.W_K, dk.row(t), lc.attn_in.row(t));
            add_outer(g.W_V, dv.row(t), lc.attn_in.row(t));
            std::fill(dattn.begin(), dattn.end(), 0.0f);
            kernels::gemv_t_acc(b.W_Q, dq.row(t), dattn);
            kernels::gemv_t_acc(b.W_K, dk.row(t), dattn);
            kernels::gemv_t_acc(b.W_V, dv.row(t), dattn);
            layer_norm_backward(lc.x_pre.row(t), lc.ln1[t], b.ln1, dattn, g.ln1, dxpre.row(t));
        }
        dresid = std::move(dxpre);
    }

    for (std::size_t t = 0; t < T; ++t) {
        kernels::axpy(1.0f, dresid.row(t), grad.W_E.row(static_cast<std::size_t>(tokens[t])));
        kernels::axpy(1.0f, dresid.row(t), grad.W_pos.row(t));
    }
    return loss;
}

void zero(ModelParams& p) {
    for (auto& t : p.named_tensors()) std::fill(t.data.begin(), t.data.end(), 0.0f);
}

} // namespace

double model_loss_and_grad(const ModelParams& params, const std::vector<std::vector<int>>& prompts, ModelParams& grad) {
    std::size_t count = 0;
    for (const auto& p : prompts) count += p.empty() ? 0 : p.size() - 1;
    if (count == 0) throw InputError("model_loss_and_grad: no predicted positions");
    const float inv_count = 1.0f / static_cast<float>(count);

    // Fixed chunking keeps the reduction order independent of the thread count.
    const std::size_t chunks = std::min(kGradChunks, prompts.size());
    std::vector<ModelParams> partial(chunks, ModelParams::zeros(params.config));
    std::vector<double> losses(chunks, 0.0);
    parallel_for(chunks, [&](std::size_t c) {
        for (std::size_t i = c; i < prompts.size(); i += chunks) {
            losses[c] += sequence_backward(params, prompts[i], inv_count, partial[c]);
        }
    });
    zero(grad);
    auto dst = grad.named_tensors();
    double loss = 0.0;
    for (std::size_t c = 0; c < chunks; ++c) {
        loss += losses[c];
        auto src = partial[c].named_tensors();
        for (std::size_t i = 0; i < dst.size(); ++i) kernels::axpy(1.0f, src[i].data, dst[i].data);
    }
    return loss / static_cast<double>(count);
}

ModelParams train_model(const ModelConfig& config, const Corpus& corpus, const ModelTrainConfig& train,
                        std::vector<ModelTrainStep>* log, const std::function<void(const ModelTrainStep&)>& on_step) {
    config.validate();
    if (corpus.prompts.empty()) throw InputError("train_model: empty corpus");
    ModelParams params = ModelParams::random(config, train.seed, train.init_scale);
    ModelParams grad = ModelParams::zeros(config);
    ModelParams m = ModelParams::zeros(config);
    ModelParams v = ModelParams::zeros(config);

    std::mt19937_64 rng(train.seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_int_distribution<std::size_t> pick(0, corpus.prompts.size() - 1);
    std::vector<std::vector<int>> batch(train.batch_size);
    for (std::size_t step = 1; step <= train.steps; ++step) {
        for (auto& p : batch) {
            const auto& src = corpus.prompts[pick(rng)];
            p.assign(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(std::min(src.size(), config.context_len)));
        }
        const double loss = model_loss_and_grad(params, batch, grad);
        if (!std::isfinite(loss)) throw TrainingError("train_model: non-finite loss", static_cast<long>(step));

        const float lr = train.linear_decay
                             ? train.learning_rate * static_cast<float>(train.steps - step + 1) / static_cast<float>(train.steps)
                             : train.learning_rate;
        const kernels::AdamParams hp{lr, train.beta1, train.beta2, train.eps,
                                     1.0f - std::pow(train.beta1, static_cast<float>(step)),
                                     1.0f - std::pow(train.beta2, static_cast<float>(step))};
        auto pt = params.named_tensors();
        auto gt = grad.named_tensors();
        auto mt = m.named_tensors();
        auto vt = v.named_tensors();
        for (std::size_t i = 0; i < pt.size(); ++i) {
            kernels::active().adam(pt[i].data.data(), gt[i].data.data(), mt[i].data.data(), vt[i].data.data(),
                                   pt[i].data.size(), hp);
            if (train.weight_decay > 0.0f && pt[i].shape.size() == 2) {
                const float keep = 1.0f - lr * train.weight_decay;
                for (float& w : pt[i].data) w *= keep;
            }
        }
        const ModelTrainStep rec{step, loss};
        if (log) log->push_back(rec);
        if (on_step) on_step(rec);
    }
    return params;
}

} // namespace tc
