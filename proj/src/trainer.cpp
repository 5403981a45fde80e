#include "tc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>

#include "tc/checkpoint.hpp"
#include "tc/error.hpp"
#include "tc/eval.hpp"
#include "tc/kernels.hpp"
#include "tc/parallel.hpp"

namespace tc {

void TrainConfig::validate() const {
    if (!(lambda1 >= 0.0f) || !std::isfinite(lambda1)) throw ConfigError("lambda1 must be a finite non-negative number");
    if (!(learning_rate > 0.0f)) throw ConfigError("learning rate must be positive");
    if (batch_size == 0 || context_len == 0 || total_tokens == 0 || d_features_multiplier == 0) {
        throw ConfigError("batch size, context length, total tokens and the feature multiplier must be positive");
    }
    if (!(beta1 >= 0.0f && beta1 < 1.0f && beta2 >= 0.0f && beta2 < 1.0f)) throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(eps > 0.0f)) throw ConfigError("Adam eps must be positive");
}

ActivationPairStream harvest(const ModelParams& params, const Corpus& corpus, std::size_t layer, std::size_t limit) {
    if (corpus.prompts.empty()) throw InputError("harvest: empty corpus");
    if (layer >= params.config.n_layers) {
        throw ConfigError("harvest: layer " + std::to_string(layer) + " but the model has " +
                          std::to_string(params.config.n_layers) + " layers");
    }
    const auto prompts = clip_prompts(corpus, params.config.context_len);
    const std::size_t d = params.config.d_model;

    // only run the prompts that contribute to the first `limit` pairs
    std::size_t n_prompts = 0;
    for (std::size_t have = 0; n_prompts < prompts.size() && have < limit; ++n_prompts) have += prompts[n_prompts].size();

    std::vector<ActivationCache> caches(n_prompts);
    parallel_for(n_prompts, [&](std::size_t p) {
        if (!prompts[p].empty()) caches[p] = forward_with_cache(params, prompts[p]);
    });

    ActivationPairStream s;
    s.layer = layer;
    s.d_model = d;
    for (std::size_t p = 0; p < n_prompts && s.size() < limit; ++p) {
        if (prompts[p].empty()) continue;
        const LayerCache& lc = caches[p].layers[layer];
        for (std::size_t t = 0; t < prompts[p].size() && s.size() < limit; ++t) {
            s.inputs.insert(s.inputs.end(), lc.mlp_in.row(t).begin(), lc.mlp_in.row(t).end());
            s.outputs.insert(s.outputs.end(), lc.mlp_out.row(t).begin(), lc.mlp_out.row(t).end());
            s.provenance.push_back({static_cast<std::uint32_t>(p), static_cast<std::uint32_t>(t)});
        }
    }
    return s;
}

void save_pairs(const ActivationPairStream& stream, const std::filesystem::path& path) {
    Checkpoint ckpt;
    ckpt.kind = "pairs";
    ckpt.config = {{"layer", stream.layer}, {"d_model", stream.d_model}, {"count", stream.size()}};
    std::vector<float> prov;
    prov.reserve(2 * stream.size());
    for (const auto& p : stream.provenance) {
        prov.push_back(static_cast<float>(p.prompt));
        prov.push_back(static_cast<float>(p.token));
    }
    ckpt.tensors.push_back({"inputs", {stream.size(), stream.d_model}, stream.inputs});
    ckpt.tensors.push_back({"outputs", {stream.size(), stream.d_model}, stream.outputs});
    ckpt.tensors.push_back({"provenance", {stream.size(), 2}, std::move(prov)});
    write_checkpoint(path, ckpt);
}

ActivationPairStream load_pairs(const std::filesystem::path& path) {
    const Checkpoint ckpt = read_checkpoint(path);
    if (ckpt.kind != "pairs") throw FormatError("expected a pairs file, found kind \"" + ckpt.kind + "\"");
    ActivationPairStream s;
    try {
        s.layer = ckpt.config.at("layer").get<std::size_t>();
        s.d_model = ckpt.config.at("d_model").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("pairs: bad config: ") + e.what());
    }
    const auto& in = ckpt.tensor("inputs");
    const auto& out = ckpt.tensor("outputs");
    const auto& prov = ckpt.tensor("provenance");
    const std::size_t n = prov.shape.empty() ? 0 : prov.shape[0];
    if (in.data.size() != n * s.d_model || out.data.size() != n * s.d_model || prov.data.size() != 2 * n) {
        throw FormatError("pairs: tensor sizes disagree");
    }
    s.inputs = in.data;
    s.outputs = out.data;
    for (std::size_t i = 0; i < n; ++i) {
        s.provenance.push_back({static_cast<std::uint32_t>(prov.data[2 * i]), static_cast<std::uint32_t>(prov.data[2 * i + 1])});
    }
    return s;
}

Coder init_coder(CoderKind kind, std::size_t layer, std::size_t d_model, std::size_t d_features, std::uint64_t seed) {
    Coder c = Coder::zeros(kind, layer, d_model, d_model, d_features);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> enc(-1.0f / std::sqrt(static_cast<float>(d_model)),
                                              1.0f / std::sqrt(static_cast<float>(d_model)));
    std::uniform_real_distribution<float> dec(-1.0f / std::sqrt(static_cast<float>(d_features)),
                                              1.0f / std::sqrt(static_cast<float>(d_features)));
    for (auto& w : c.W_enc.data) w = enc(rng);
    for (auto& w : c.W_dec.data) w = dec(rng);
    return c;
}

namespace {

constexpr std::size_t kGradChunks = 8;

struct CoderGrad {
    Matrix W_enc, W_dec;
    Vec b_enc, b_dec;
    double faithfulness = 0.0;
    double l1 = 0.0;
    double l0 = 0.0;

    explicit CoderGrad(const Coder& c)
        : W_enc(c.W_enc.rows, c.W_enc.cols), W_dec(c.W_dec.rows, c.W_dec.cols), b_enc(c.b_enc.size(), 0.0f),
          b_dec(c.b_dec.size(), 0.0f) {}

    void clear() {
        std::fill(W_enc.data.begin(), W_enc.data.end(), 0.0f);
        std::fill(W_dec.data.begin(), W_dec.data.end(), 0.0f);
        std::fill(b_enc.begin(), b_enc.end(), 0.0f);
        std::fill(b_dec.begin(), b_dec.end(), 0.0f);
        faithfulness = l1 = l0 = 0.0;
    }

    void add(const CoderGrad& o) {
        kernels::axpy(1.0f, o.W_enc.data, W_enc.data);
        kernels::axpy(1.0f, o.W_dec.data, W_dec.data);
        kernels::axpy(1.0f, o.b_enc, b_enc);
        kernels::axpy(1.0f, o.b_dec, b_dec);
        faithfulness += o.faithfulness;
        l1 += o.l1;
        l0 += o.l0;
    }
};

// Accumulates the gradient of sum over rows of (||t - r||^2 + lambda1 ||z||_1) / batch.
void accumulate(const Coder& c, const ActivationPairStream& s, std::size_t begin, std::size_t end,
                std::size_t batch, float lambda1, CoderGrad& g) {
    const std::size_t F = c.d_features();
    const std::size_t d = c.d_out();
    const float inv_b = 1.0f / static_cast<float>(batch);
    Vec z(F), recon(d), err(d);
    std::vector<std::size_t> active;
    for (std::size_t r = begin; r < end; ++r) {
        const auto x = c.kind == CoderKind::transcoder ? s.input(r) : s.output(r);
        const auto target = s.output(r);
        coder_encode(c, x, z);
        coder_decode(c, z, recon);
        active.clear();
        double l1 = 0.0;
        for (std::size_t i = 0; i < F; ++i) {
            if (z[i] > 0.0f) {
                active.push_back(i);
                l1 += z[i];
            }
        }
        double sq = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const float e = recon[j] - target[j];
            sq += static_cast<double>(e) * e;
            err[j] = 2.0f * e * inv_b;
        }
        g.faithfulness += sq;
        g.l1 += l1;
        g.l0 += static_cast<double>(active.size());

        kernels::axpy(1.0f, err, g.b_dec);
        for (std::size_t i : active) {
            kernels::axpy(z[i], err, g.W_dec.row(i));
            const float dz = kernels::dot(c.f_dec(i), err) + lambda1 * inv_b;
            g.b_enc[i] += dz;
            kernels::axpy(dz, x, g.W_enc.row(i));
        }
    }
}

struct AdamState {
    std::vector<Vec> m, v;
};

std::vector<std::span<float>> coder_tensors(Coder& c) { return {c.W_enc.data, c.b_enc, c.W_dec.data, c.b_dec}; }
std::vector<std::span<float>> grad_tensors(CoderGrad& g) { return {g.W_enc.data, g.b_enc, g.W_dec.data, g.b_dec}; }

} // namespace

CoderGradient coder_loss_gradient(const Coder& coder, std::span<const float> x, std::span<const float> target,
                                  float lambda1) {
    coder.validate();
    if (coder.d_in() != coder.d_out()) throw ConfigError("coder_loss_gradient: needs d_in == d_out");
    if (x.size() != coder.d_in() || target.size() != coder.d_out()) throw InputError("coder_loss_gradient: length mismatch");
    if (coder.kind == CoderKind::sae && !std::equal(x.begin(), x.end(), target.begin())) {
        throw UsageError("coder_loss_gradient: an SAE reconstructs its own input");
    }
    ActivationPairStream one;
    one.d_model = coder.d_in();
    one.inputs.assign(x.begin(), x.end());
    one.outputs.assign(target.begin(), target.end());
    one.provenance.push_back({0, 0});
    CoderGrad g(coder);
    accumulate(coder, one, 0, 1, 1, lambda1, g);
    return {std::move(g.W_enc), std::move(g.W_dec), std::move(g.b_enc), std::move(g.b_dec)};
}

TrainResult train_coder(const TrainConfig& config, const ActivationPairStream& stream, CoderKind kind, const Coder* init) {
    config.validate();
    if (stream.size() == 0) throw InputError("train_coder: empty activation stream");

    TrainResult result;
    if (init) {
        init->validate();
        if (init->d_in() != stream.d_model || init->d_out() != stream.d_model || init->kind != kind) {
            throw ConfigError("train_coder: initial coder does not match the stream");
        }
        result.coder = *init;
    } else {
        result.coder = init_coder(kind, stream.layer, stream.d_model, config.d_features_multiplier * stream.d_model,
                                  config.seed);
    }
    Coder& c = result.coder;
    c.layer = stream.layer;
    c.lambda1 = config.lambda1;

    const std::size_t n = stream.size();
    const std::size_t batch = std::min(config.batch_size, n);
    const std::size_t n_batches = (n + batch - 1) / batch;
    const std::size_t steps = static_cast<std::size_t>((config.total_tokens + batch - 1) / batch);

    std::vector<CoderGrad> partial(kGradChunks, CoderGrad(c));
    CoderGrad total(c);
    AdamState adam;
    for (auto t : coder_tensors(c)) {
        adam.m.emplace_back(t.size(), 0.0f);
        adam.v.emplace_back(t.size(), 0.0f);
    }

    std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> order(n_batches);
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = n_batches;
    std::uint64_t seen = 0;
    double b1t = 1.0, b2t = 1.0;

    for (std::size_t step = 0; step < steps; ++step) {
        if (cursor == n_batches) {
            if (config.shuffle) std::shuffle(order.begin(), order.end(), rng);
            cursor = 0;
        }
        const std::size_t begin = order[cursor++] * batch;
        const std::size_t end = std::min(begin + batch, n);
        const std::size_t rows = end - begin;

        parallel_for(kGradChunks, [&](std::size_t k) {
            partial[k].clear();
            const std::size_t lo = begin + rows * k / kGradChunks;
            const std::size_t hi = begin + rows * (k + 1) / kGradChunks;
            accumulate(c, stream, lo, hi, rows, config.lambda1, partial[k]);
        });
        total.clear();
        for (const auto& p : partial) total.add(p);

        TrainLogRow row{step, total.faithfulness / rows, total.l1 / rows, total.l0 / rows};
        const double loss = row.faithfulness + config.lambda1 * row.sparsity_l1;
        if (!std::isfinite(loss)) {
            throw TrainingError("train_coder: non-finite loss at step " + std::to_string(step), static_cast<long>(step));
        }
        result.log.push_back(row);

        b1t *= config.beta1;
        b2t *= config.beta2;
        const kernels::AdamParams hp{config.learning_rate, config.beta1, config.beta2, config.eps,
                                     static_cast<float>(1.0 - b1t), static_cast<float>(1.0 - b2t)};
        auto params = coder_tensors(c);
        auto grads = grad_tensors(total);
        for (std::size_t i = 0; i < params.size(); ++i) {
            kernels::active().adam(params[i].data(), grads[i].data(), adam.m[i].data(), adam.v[i].data(),
                                   params[i].size(), hp);
        }
        seen += rows;
    }
    c.trained_tokens = (init ? init->trained_tokens : 0) + seen;
    return result;
}

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

} // namespace

std::string training_log_csv(const std::vector<TrainLogRow>& log) {
    std::ostringstream out;
    out << "step,faithfulness,sparsity_l1,l0\n";
    for (const auto& r : log) out << r.step << ',' << fmt(r.faithfulness) << ',' << fmt(r.sparsity_l1) << ',' << fmt(r.l0) << '\n';
    return out.str();
}

std::string SweepResult::to_csv() const {
    std::ostringstream out;
    out << "lambda1,kind,mean_l0,ce_original,ce_replaced,ce_mean_ablated\n";
    for (const auto& r : runs) {
        out << fmt(r.lambda1) << ',' << to_string(r.kind) << ',';
        if (r.error) {
            out << ',' << fmt(r.ce_original) << ",," << fmt(r.ce_mean_ablated) << '\n';
        } else {
            out << fmt(r.mean_l0) << ',' << fmt(r.ce_original) << ',' << fmt(r.ce_replaced) << ',' << fmt(r.ce_mean_ablated)
                << '\n';
        }
    }
    out << ",original,," << fmt(ce_original) << ',' << fmt(ce_original) << ',' << fmt(ce_mean_ablated) << '\n';
    out << ",mean_ablation,," << fmt(ce_original) << ',' << fmt(ce_mean_ablated) << ',' << fmt(ce_mean_ablated) << '\n';
    return out.str();
}

SweepResult sweep(const TrainConfig& base, const std::vector<float>& lambdas, const ActivationPairStream& stream,
                  const std::vector<CoderKind>& kinds, const ModelParams& params, const Corpus& eval_corpus) {
    if (lambdas.size() < 2) throw UsageError("sweep: needs at least two lambda1 values");
    if (kinds.empty()) throw UsageError("sweep: no coder kinds given");

    const Vec mean = mean_mlp_output(params, eval_corpus, stream.layer);
    std::vector<MlpIntervention> mean_ablation(params.config.n_layers);
    mean_ablation[stream.layer].kind = MlpIntervention::Kind::mean;
    mean_ablation[stream.layer].mean = mean;

    SweepResult result;
    result.ce_original = corpus_cross_entropy(params, eval_corpus, {});
    result.ce_mean_ablated = corpus_cross_entropy(params, eval_corpus, mean_ablation);

    std::vector<float> sorted = lambdas;
    std::stable_sort(sorted.begin(), sorted.end());
    std::vector<CoderKind> ks = kinds;
    std::sort(ks.begin(), ks.end());
    for (float lam : sorted) {
        for (CoderKind kind : ks) {
            SweepRow row;
            row.lambda1 = lam;
            row.kind = kind;
            row.ce_original = result.ce_original;
            row.ce_mean_ablated = result.ce_mean_ablated;
            try {
                TrainConfig cfg = base;
                cfg.lambda1 = lam;
                TrainResult tr = train_coder(cfg, stream, kind);
                const EvalReport rep = evaluate(params, tr.coder, eval_corpus, mean);
                row.mean_l0 = rep.mean_l0;
                row.ce_replaced = rep.ce_replaced;
                row.coder = std::move(tr.coder);
            } catch (const Error& e) {
                row.error = e.what();
            }
            result.runs.push_back(std::move(row));
        }
    }
    return result;
}

} // namespace tc
