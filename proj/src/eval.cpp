#include "tc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "tc/attribution.hpp"
#include "tc/error.hpp"
#include "tc/kernels.hpp"
#include "tc/parallel.hpp"

namespace tc {

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

} // namespace

std::string EvalReport::to_csv() const {
    return "mean_l0,ce_original,ce_replaced,ce_mean_ablated,tokens_evaluated,ordering_ok\n" + fmt(mean_l0) + ',' +
           fmt(ce_original) + ',' + fmt(ce_replaced) + ',' + fmt(ce_mean_ablated) + ',' + std::to_string(tokens_evaluated) +
           ',' + (ordering_ok ? "true" : "false") + '\n';
}

std::vector<std::vector<int>> clip_prompts(const Corpus& corpus, std::size_t context_len) {
    std::vector<std::vector<int>> out;
    out.reserve(corpus.prompts.size());
    for (const auto& p : corpus.prompts) {
        out.emplace_back(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(std::min(p.size(), context_len)));
    }
    return out;
}

Vec mean_mlp_output(const ModelParams& params, const Corpus& corpus, std::size_t layer) {
    if (corpus.token_count() == 0) throw InputError("mean_mlp_output: empty corpus");
    if (layer >= params.config.n_layers) throw ConfigError("mean_mlp_output: layer out of range");
    const auto prompts = clip_prompts(corpus, params.config.context_len);
    const std::size_t d = params.config.d_model;
    std::vector<std::vector<double>> sums(prompts.size(), std::vector<double>(d, 0.0));
    parallel_for(prompts.size(), [&](std::size_t p) {
        if (prompts[p].empty()) return;
        const auto cache = forward_with_cache(params, prompts[p]);
        const Matrix& out = cache.layers[layer].mlp_out;
        for (std::size_t t = 0; t < out.rows; ++t)
            for (std::size_t j = 0; j < d; ++j) sums[p][j] += out(t, j);
    });
    std::vector<double> total(d, 0.0);
    std::size_t count = 0;
    for (std::size_t p = 0; p < prompts.size(); ++p) {
        for (std::size_t j = 0; j < d; ++j) total[j] += sums[p][j];
        count += prompts[p].size();
    }
    Vec mean(d);
    for (std::size_t j = 0; j < d; ++j) mean[j] = static_cast<float>(total[j] / static_cast<double>(count));
    return mean;
}

double mean_l0(const std::vector<Vec>& z_rows) {
    if (z_rows.empty()) return 0.0;
    double active = 0.0;
    for (const auto& z : z_rows) active += static_cast<double>(std::count_if(z.begin(), z.end(), [](float v) { return v > 0.0f; }));
    return active / static_cast<double>(z_rows.size());
}

namespace {

struct CeParts {
    double sum = 0.0;
    std::size_t count = 0;
};

CeParts ce_parts(const ModelParams& params, const std::vector<std::vector<int>>& prompts,
                 const std::vector<MlpIntervention>& interventions) {
    std::vector<CeParts> parts(prompts.size());
    parallel_for(prompts.size(), [&](std::size_t p) {
        if (prompts[p].size() < 2) return;
        const auto cache = run_with_interventions(params, prompts[p], interventions);
        const auto [s, c] = cross_entropy_sum(cache.logits, prompts[p], Vocab::kPad);
        parts[p] = {s, c};
    });
    CeParts total;
    for (const auto& p : parts) {
        total.sum += p.sum;
        total.count += p.count;
    }
    return total;
}

double mean_of(const CeParts& p) { return p.count ? p.sum / static_cast<double>(p.count) : 0.0; }

} // namespace

double corpus_cross_entropy(const ModelParams& params, const Corpus& corpus,
                            const std::vector<MlpIntervention>& interventions) {
    return mean_of(ce_parts(params, clip_prompts(corpus, params.config.context_len), interventions));
}

EvalReport evaluate(const ModelParams& params, const Coder& coder, const Corpus& corpus, const std::optional<Vec>& mean) {
    if (corpus.token_count() == 0) throw InputError("evaluate: empty corpus");
    coder.validate();
    const std::size_t layer = coder.layer;
    const std::size_t d = params.config.d_model;
    if (layer >= params.config.n_layers) throw ConfigError("evaluate: coder layer out of range");
    if (coder.d_in() != d || coder.d_out() != d) throw ConfigError("evaluate: coder width does not match d_model");

    const auto prompts = clip_prompts(corpus, params.config.context_len);
    const Vec mu = mean ? *mean : mean_mlp_output(params, corpus, layer);
    if (mu.size() != d) throw ConfigError("evaluate: mean vector has the wrong length");

    std::vector<MlpIntervention> replaced(params.config.n_layers), ablated(params.config.n_layers);
    replaced[layer].kind = MlpIntervention::Kind::coder;
    replaced[layer].coder = &coder;
    ablated[layer].kind = MlpIntervention::Kind::mean;
    ablated[layer].mean = mu;

    std::vector<CeParts> orig(prompts.size()), repl(prompts.size());
    std::vector<double> active(prompts.size(), 0.0);
    std::vector<std::size_t> positions(prompts.size(), 0);
    parallel_for(prompts.size(), [&](std::size_t p) {
        if (prompts[p].empty()) return;
        const auto cache = forward_with_cache(params, prompts[p]);
        const LayerCache& lc = cache.layers[layer];
        Vec z(coder.d_features());
        for (std::size_t t = 0; t < prompts[p].size(); ++t) {
            coder_encode(coder, coder.kind == CoderKind::transcoder ? lc.mlp_in.row(t) : lc.mlp_out.row(t), z);
            active[p] += static_cast<double>(std::count_if(z.begin(), z.end(), [](float v) { return v > 0.0f; }));
        }
        positions[p] = prompts[p].size();
        if (prompts[p].size() < 2) return;
        const auto [so, co] = cross_entropy_sum(cache.logits, prompts[p], Vocab::kPad);
        orig[p] = {so, co};
        const auto rc = run_with_interventions(params, prompts[p], replaced);
        const auto [sr, cr] = cross_entropy_sum(rc.logits, prompts[p], Vocab::kPad);
        repl[p] = {sr, cr};
    });

    CeParts o, r;
    double act = 0.0;
    std::size_t pos = 0;
    for (std::size_t p = 0; p < prompts.size(); ++p) {
        o.sum += orig[p].sum;
        o.count += orig[p].count;
        r.sum += repl[p].sum;
        r.count += repl[p].count;
        act += active[p];
        pos += positions[p];
    }

    EvalReport rep;
    rep.mean_l0 = pos ? act / static_cast<double>(pos) : 0.0;
    rep.ce_original = mean_of(o);
    rep.ce_replaced = mean_of(r);
    rep.ce_mean_ablated = mean_of(ce_parts(params, prompts, ablated));
    rep.tokens_evaluated = o.count;
    rep.ordering_ok = rep.ce_original <= rep.ce_replaced && rep.ce_replaced <= rep.ce_mean_ablated;
    return rep;
}

std::vector<ActivatingExample> top_activating(const ModelParams& params, const Coder& coder, std::size_t feature,
                                              const Corpus& corpus, std::size_t k, bool redact, const Vocab* vocab) {
    if (k == 0) throw UsageError("top_activating: k must be at least 1");
    if (feature >= coder.d_features()) throw InputError("top_activating: feature index out of range");
    const auto prompts = clip_prompts(corpus, params.config.context_len);
    std::vector<std::vector<ActivatingExample>> per(prompts.size());
    parallel_for(prompts.size(), [&](std::size_t p) {
        if (prompts[p].empty()) return;
        const auto cache = forward_with_cache(params, prompts[p]);
        for (std::size_t t = 0; t < prompts[p].size(); ++t) {
            const float a = feature_activation(cache, coder, feature, t);
            if (a > 0.0f) per[p].push_back({p, t, a, std::nullopt, 0});
        }
    });
    std::vector<ActivatingExample> all;
    for (auto& v : per) all.insert(all.end(), v.begin(), v.end());
    const std::size_t n = std::min(k, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n), all.end(),
                      [](const ActivatingExample& a, const ActivatingExample& b) {
                          if (a.activation != b.activation) return a.activation > b.activation;
                          if (a.prompt != b.prompt) return a.prompt < b.prompt;
                          return a.token < b.token;
                      });
    all.resize(n);
    for (auto& ex : all) {
        const auto& toks = prompts[ex.prompt];
        ex.window_start = ex.token >= 8 ? ex.token - 8 : 0;
        if (redact || !vocab) continue;
        std::vector<std::string> w;
        for (std::size_t t = ex.window_start; t < std::min(toks.size(), ex.token + 3); ++t) w.push_back(vocab->token(toks[t]));
        ex.window = std::move(w);
    }
    return all;
}

double probability_difference(std::span<const float> logits, const std::vector<int>& year_tokens,
                              std::size_t input_year_index) {
    if (input_year_index >= year_tokens.size()) throw InputError("probability_difference: input year not in the year list");
    double mx = -INFINITY;
    for (int id : year_tokens) {
        if (id < 0 || static_cast<std::size_t>(id) >= logits.size()) throw InputError("probability_difference: year token out of range");
        mx = std::max(mx, static_cast<double>(logits[id]));
    }
    std::vector<double> p(year_tokens.size());
    double z = 0.0;
    for (std::size_t j = 0; j < year_tokens.size(); ++j) {
        p[j] = std::exp(static_cast<double>(logits[year_tokens[j]]) - mx);
        z += p[j];
    }
    double above = 0.0, below = 0.0;
    for (std::size_t j = 0; j < year_tokens.size(); ++j) (j > input_year_index ? above : below) += p[j] / z;
    return above - below;
}

YearTask YearTask::standard(const Vocab& vocab) {
    YearTask task;
    task.prompts = gen_greater_than(vocab);
    for (int y = 0; y < 100; ++y) task.year_tokens.push_back(vocab.year_token(y));
    return task;
}

double mean_probability_difference(const ModelParams& params, const YearTask& task,
                                   const std::vector<MlpIntervention>& interventions) {
    std::vector<double> pd(task.prompts.size());
    parallel_for(task.prompts.size(), [&](std::size_t p) {
        const auto cache = run_with_interventions(params, task.prompts[p], interventions);
        pd[p] = probability_difference(cache.logits.row(cache.logits.rows - 1), task.year_tokens, p);
    });
    double sum = 0.0;
    for (double v : pd) sum += v;
    return task.prompts.empty() ? 0.0 : sum / static_cast<double>(task.prompts.size());
}

std::string to_string(AblationUnit unit) {
    return unit == AblationUnit::transcoder_features ? "transcoder_features" : "mlp_neurons";
}

AblationUnit ablation_unit_from_string(const std::string& s) {
    if (s == "transcoder_features") return AblationUnit::transcoder_features;
    if (s == "mlp_neurons") return AblationUnit::mlp_neurons;
    throw UsageError("unknown ablation unit '" + s + "' (expected transcoder_features or mlp_neurons)");
}

std::string AblationCurve::to_csv() const {
    std::ostringstream out;
    out << "k,prob_diff,unit\n";
    for (std::size_t i = 0; i < ks.size(); ++i) out << ks[i] << ',' << fmt(prob_diff[i]) << ',' << to_string(unit) << '\n';
    return out.str();
}

namespace {

std::size_t unit_count(const ModelParams& params, AblationUnit unit, const Coder* coder) {
    return unit == AblationUnit::mlp_neurons ? params.config.d_mlp : coder->d_features();
}

MlpIntervention unit_intervention(AblationUnit unit, const Coder* coder, std::vector<std::uint8_t> keep) {
    MlpIntervention iv;
    iv.kind = unit == AblationUnit::mlp_neurons ? MlpIntervention::Kind::neuron_mask : MlpIntervention::Kind::coder;
    iv.coder = unit == AblationUnit::mlp_neurons ? nullptr : coder;
    iv.keep = std::move(keep);
    return iv;
}

void check_unit_args(const ModelParams& params, AblationUnit unit, std::size_t layer, const Coder* coder) {
    if (layer >= params.config.n_layers) throw ConfigError("ablation: layer out of range");
    if (unit == AblationUnit::transcoder_features) {
        if (!coder) throw UsageError("ablation: transcoder features need a coder");
        if (coder->layer != layer) throw ConfigError("ablation: coder was trained for a different layer");
    }
}

} // namespace

std::vector<double> unit_variances(const ModelParams& params, const YearTask& task, AblationUnit unit,
                                   std::size_t layer, const Coder* coder) {
    check_unit_args(params, unit, layer, coder);
    const std::size_t n_units = unit_count(params, unit, coder);
    std::vector<Vec> acts(task.prompts.size(), Vec(n_units, 0.0f));
    parallel_for(task.prompts.size(), [&](std::size_t p) {
        const auto cache = forward_with_cache(params, task.prompts[p]);
        const LayerCache& lc = cache.layers[layer];
        const std::size_t t = task.prompts[p].size() - 1;
        if (unit == AblationUnit::mlp_neurons) {
            std::copy(lc.mlp_hidden.row(t).begin(), lc.mlp_hidden.row(t).end(), acts[p].begin());
        } else {
            coder_encode(*coder, coder->kind == CoderKind::transcoder ? lc.mlp_in.row(t) : lc.mlp_out.row(t), acts[p]);
        }
    });
    std::vector<double> var(n_units, 0.0);
    const double n = static_cast<double>(task.prompts.size());
    for (std::size_t u = 0; u < n_units; ++u) {
        double mean = 0.0;
        for (const auto& a : acts) mean += a[u];
        mean /= n;
        double ss = 0.0;
        for (const auto& a : acts) ss += (a[u] - mean) * (a[u] - mean);
        var[u] = ss / n;
    }
    return var;
}

AblationCurve topk_ablation_curve(const ModelParams& params, const YearTask& task, AblationUnit unit, std::size_t layer,
                                  const Coder* coder, const std::vector<std::size_t>& ks) {
    check_unit_args(params, unit, layer, coder);
    if (!std::is_sorted(ks.begin(), ks.end())) throw UsageError("topk_ablation_curve: ks must be ascending");
    const std::size_t n_units = unit_count(params, unit, coder);
    const auto var = unit_variances(params, task, unit, layer, coder);
    std::vector<std::size_t> order(n_units);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return var[a] > var[b]; });

    const std::size_t L = params.config.n_layers;
    auto run = [&](std::vector<std::uint8_t> keep) {
        std::vector<MlpIntervention> ivs(L);
        ivs[layer] = unit_intervention(unit, coder, std::move(keep));
        return mean_probability_difference(params, task, ivs);
    };

    AblationCurve curve;
    curve.unit = unit;
    curve.layer = layer;
    curve.original = mean_probability_difference(params, task);
    curve.full_reference = run(std::vector<std::uint8_t>(n_units, 1));
    curve.zero_floor = run(std::vector<std::uint8_t>(n_units, 0));
    for (std::size_t k : ks) {
        const std::size_t kk = std::min(k, n_units);
        std::vector<std::uint8_t> keep(n_units, 0);
        for (std::size_t i = 0; i < kk; ++i) keep[order[i]] = 1;
        curve.ks.push_back(kk);
        curve.prob_diff.push_back(run(std::move(keep)));
    }
    return curve;
}

std::vector<Connection> ov_connections(const ModelParams& params, const Coder& upper, std::size_t upper_feature,
                                       std::size_t head_layer, std::size_t head, const Coder& lower) {
    const ModelConfig& cfg = params.config;
    if (upper_feature >= upper.d_features()) throw InputError("ov_connections: upper feature out of range");
    if (head_layer >= cfg.n_layers || head >= cfg.n_heads) throw InputError("ov_connections: head out of range");
    if (upper.layer >= cfg.n_layers || !(lower.layer < head_layer && head_layer <= upper.layer)) {
        throw UsageError("ov_connections: need lower layer < head layer <= upper layer");
    }
    if (upper.d_in() != cfg.d_model || lower.d_out() != cfg.d_model) throw ConfigError("ov_connections: coder width mismatch");

    // the upper encoder reads LN2(x): fold its gain, then go through W_OV^T and fold LN1's gain
    Vec dir(cfg.d_model);
    const auto f = upper.f_enc(upper_feature);
    const auto& g2 = params.blocks[upper.layer].ln2.gain;
    for (std::size_t j = 0; j < cfg.d_model; ++j) dir[j] = f[j] * g2[j];
    const BlockParams& b = params.blocks[head_layer];
    const std::size_t dh = cfg.d_head, off = head * dh;
    Vec through_o(dh, 0.0f);
    for (std::size_t r = 0; r < cfg.d_model; ++r) kernels::axpy(dir[r], b.W_O.row(r).subspan(off, dh), through_o);
    Vec u(cfg.d_model, 0.0f);
    for (std::size_t j = 0; j < dh; ++j) kernels::axpy(through_o[j], b.W_V.row(off + j), u);
    const auto& g1 = b.ln1.gain;
    for (std::size_t j = 0; j < cfg.d_model; ++j) u[j] *= g1[j];

    std::vector<Connection> out(lower.d_features());
    for (std::size_t m = 0; m < lower.d_features(); ++m) out[m] = {m, kernels::dot_f64(lower.f_dec(m), u)};
    std::stable_sort(out.begin(), out.end(), [](const Connection& a, const Connection& b) { return a.weight > b.weight; });
    return out;
}

std::vector<double> weighted_deembedding_scores(const ModelParams& params, const Coder& upper, std::size_t upper_feature,
                                                std::size_t head_layer, std::size_t head, const Coder& lower,
                                                std::size_t top_m) {
    if (top_m == 0) throw UsageError("weighted_deembedding_scores: top_m must be at least 1");
    const auto conns = ov_connections(params, upper, upper_feature, head_layer, head, lower);
    std::vector<double> scores(params.config.vocab_size, 0.0);
    for (std::size_t m = 0; m < std::min(top_m, conns.size()); ++m) {
        if (conns[m].weight == 0.0) continue;
        const auto de = deembedding_scores(lower.f_enc(conns[m].feature), params.W_E);
        for (std::size_t v = 0; v < scores.size(); ++v) scores[v] += conns[m].weight * de[v];
    }
    return scores;
}

std::string scores_csv(const std::vector<std::pair<int, double>>& ranked, const Vocab* vocab) {
    std::ostringstream out;
    out << "rank,token_id,token_text,score\n";
    for (std::size_t r = 0; r < ranked.size(); ++r) {
        const int id = ranked[r].first;
        const std::string text =
            vocab && static_cast<std::size_t>(id) < vocab->size() ? csv_field(vocab->token(id)) : std::string();
        out << r + 1 << ',' << id << ',' << text << ',' << fmt(ranked[r].second) << '\n';
    }
    return out.str();
}

} // namespace tc
