// One PASS/FAIL line per acceptance criterion. Exit status 1 if any fails.
#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "support/fixtures.hpp"
#include "support/oracle.hpp"
#include "tc/attribution.hpp"
#include "tc/checkpoint.hpp"
#include "tc/circuits.hpp"
#include "tc/cli.hpp"
#include "tc/corpus.hpp"
#include "tc/eval.hpp"
#include "tc/model_train.hpp"
#include "tc/trainer.hpp"

using namespace tc;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) out.push_back(cur);
    return out;
}

int run_cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    const int code = cli::dispatch(args, out, err);
    if (code != 0) std::cerr << "tc " << args.front() << " failed (" << code << "): " << err.str();
    return code;
}

std::size_t first_active(const SearchContext& ctx, std::size_t layer, std::size_t token) {
    const Vec& z = ctx.z[layer][token];
    std::size_t best = 0;
    for (std::size_t i = 0; i < z.size(); ++i)
        if (z[i] > z[best]) best = i;
    return best;
}

// ---------------------------------------------------------------------------
// Completeness on exact-copy transcoders

Outcome completeness() {
    const ModelParams p = fx::random_model(fx::tiny_config(2, 2, 16, 32, 30, 8), 101);
    const Coder c0 = exact_copy_transcoder(p, 0), c1 = exact_copy_transcoder(p, 1);
    double worst = 0.0, worst_scaled = 0.0;
    std::size_t checked = 0, outside = 0;
    for (std::uint64_t s = 0; s < 20; ++s) {
        const auto tokens = fx::random_tokens(6, 30, 1000 + s);
        const auto cache = forward_with_cache(p, tokens);
        const SearchContext ctx(p, cache, {{0, &c0}, {1, &c1}});
        for (std::size_t t = 0; t < tokens.size(); ++t) {
            for (std::size_t f = 0; f < c1.d_features(); ++f) {
                if (!(ctx.z[1][t][f] > 0.0f)) continue;
                // pre-activation minus b_enc, straight from the cached MLP input
                double direct = 0.0;
                const auto fe = c1.f_enc(f);
                for (std::size_t j = 0; j < fe.size(); ++j) direct += static_cast<double>(fe[j]) * cache.layers[1].mlp_in(t, j);
                const PathNode root = root_node(ctx, {1, f, t});
                double sum = 0.0, scale = 0.0;
                for (const auto& c : candidate_nodes(ctx, root)) {
                    sum += c.attribution;
                    scale += std::abs(c.attribution);
                }
                const double rel = std::max(std::abs(sum - direct), std::abs(root.attribution - direct)) / std::abs(direct);
                worst = std::max(worst, rel);
                worst_scaled = std::max(worst_scaled, std::abs(sum - direct) / scale);
                if (rel > 1e-4) ++outside;
                ++checked;
            }
        }
    }
    return {checked > 0 && outside == 0,
            std::to_string(checked) + " active features over 20 prompts, " + std::to_string(outside) +
                " outside 1e-4, worst relative gap " + fmt("%.2e", worst) + " (worst gap / sum of |terms| " +
                fmt("%.1e", worst_scaled) + ")"};
}

// ---------------------------------------------------------------------------
// Factorization and the frozen-pattern gradient check

Outcome factorization() {
    const ModelParams p = fx::random_model(fx::tiny_config(2, 2, 16, 32, 30, 8, Activation::gelu), 202);
    const Coder c0 = fx::random_transcoder(0, 16, 48, 7), c1 = fx::random_transcoder(1, 16, 48, 8);
    const Matrix inv = invariant_matrix(c0, c1);
    std::size_t bit_checked = 0, bit_mismatch = 0, grad_checked = 0, grad_bad = 0;
    double worst_grad = 0.0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto tokens = fx::random_tokens(5, 30, 2000 + s);
        const auto cache = forward_with_cache(p, tokens);
        const std::size_t t = tokens.size() - 1;
        for (std::size_t i = 0; i < c0.d_features(); ++i) {
            for (std::size_t j = 0; j < c1.d_features(); j += 5) {
                const auto a = pair_attribution(cache, {0, i, t}, c1.f_enc(j), {1, t, Stage::mid}, c0);
                if (a.input_dependent_factor == 0.0f) continue;
                const float recovered = static_cast<float>(a.value / a.input_dependent_factor);
                ++bit_checked;
                if (recovered != inv(j, i)) ++bit_mismatch;
            }
        }

        // Attribution of every active layer-0 feature to one layer-1 feature,
        // summed over all paths, against a finite difference through the
        // reference forward pass with attention patterns and LayerNorm scales frozen.
        const SearchContext ctx(p, cache, {{0, &c0}, {1, &c1}});
        const std::size_t j = first_active(ctx, 1, t);
        const auto paths = greedy_paths(ctx, {1, j, t}, {2, kUnlimited, false});
        std::map<std::size_t, double> by_feature;
        for (const auto& path : paths)
            if (path.last().key.kind == NodeKind::feature && path.last().key.layer == 0 && path.last().key.token == t)
                by_feature[path.last().key.index] += path.last().attribution;
        const oracle::Trace base = oracle::forward(p, tokens);
        const auto fe = oracle::to_d(c1.f_enc(j));
        for (const auto& [i, attr] : by_feature) {
            const double z = ctx.z[0][t][i];
            const double eps = 1e-3;
            auto pre = [&](double e) {
                oracle::Options opt;
                opt.frozen = &base.stats;
                oracle::DVec delta = oracle::to_d(c0.f_dec(i));
                for (double& v : delta) v *= e;
                opt.inject.push_back({0, t, delta});
                return oracle::dot(fe, oracle::forward(p, tokens, opt).mlp_in[1][t]);
            };
            const double fd = z * (pre(eps) - pre(-eps)) / (2 * eps);
            const double err = std::abs(fd - attr);
            worst_grad = std::max(worst_grad, err / std::max(std::abs(fd), 1e-12));
            ++grad_checked;
            if (err > 0.01 * std::abs(fd) + 1e-6) ++grad_bad;
        }
    }
    return {bit_checked > 0 && bit_mismatch == 0 && grad_checked > 0 && grad_bad == 0,
            std::to_string(bit_checked) + " factors bit-identical (" + std::to_string(bit_mismatch) + " mismatches); " +
                std::to_string(grad_checked) + " gradients, worst relative gap " + fmt("%.2e", worst_grad)};
}

// ---------------------------------------------------------------------------
// Attention attribution sums to the head output

Outcome attention() {
    const ModelParams p = fx::random_model(fx::tiny_config(3, 4, 16, 32, 30, 8, Activation::gelu), 303);
    double worst = 0.0;
    std::size_t checked = 0;
    for (std::uint64_t s = 0; s < 10; ++s) {
        const auto tokens = fx::random_tokens(8, 30, 3000 + s);
        const auto cache = forward_with_cache(p, tokens);
        std::mt19937_64 rng(s);
        std::normal_distribution<float> g(0.0f, 1.0f);
        for (std::size_t l = 0; l < 3; ++l)
            for (std::size_t h = 0; h < 4; ++h)
                for (std::size_t dest = 0; dest < tokens.size(); ++dest) {
                    Vec dir(16);
                    for (auto& v : dir) v = g(rng);
                    double sum = 0.0;
                    for (std::size_t src = 0; src <= dest; ++src)
                        sum += attention_attribution(p, cache, l, h, src, dest, dir, {l, dest, Stage::mid}).value;
                    double ref = 0.0;
                    for (std::size_t k = 0; k < 16; ++k) ref += static_cast<double>(dir[k]) * cache.layers[l].head_out[h](dest, k);
                    worst = std::max(worst, std::abs(sum - ref) / std::max(1.0, std::abs(ref)));
                    ++checked;
                }
    }
    return {worst <= 1e-5, std::to_string(checked) + " head/destination sums, worst gap " + fmt("%.2e", worst)};
}

// ---------------------------------------------------------------------------
// Greedy search against brute-force enumeration

Outcome oracle_equivalence() {
    struct Inst {
        std::size_t layers, features, tokens;
        std::uint64_t seed;
    };
    std::string detail;
    bool ok = true;
    for (const Inst in : {Inst{3, 8, 4, 11}, Inst{2, 16, 6, 12}}) {
        const ModelParams p = fx::random_model(fx::tiny_config(in.layers, 2, 8, 16, 20, 8), in.seed);
        std::vector<Coder> coders;
        for (std::size_t l = 0; l < in.layers; ++l) coders.push_back(fx::random_transcoder(l, 8, in.features, in.seed * 10 + l));
        std::map<std::size_t, const Coder*> map;
        for (const auto& c : coders) map[c.layer] = &c;
        const auto tokens = fx::random_tokens(in.tokens, 20, in.seed + 1);
        const auto cache = forward_with_cache(p, tokens);
        const SearchContext ctx(p, cache, map);
        const std::size_t top = in.layers - 1, t = in.tokens - 1, f = first_active(ctx, top, t);
        const std::size_t rounds = 2 * in.layers + 1;

        std::map<std::vector<NodeKey>, double> got, want;
        for (const auto& path : greedy_paths(ctx, {top, f, t}, {rounds, kUnlimited, false})) got[path.keys()] = path.last().attribution;
        const oracle::Enumerator en(p, tokens, map);
        const auto root = en.root(top, f, t);
        for (const auto& path : en.all_paths(root, rounds)) want[path.keys] = path.attributions.back();

        bool same_set = got.size() == want.size();
        double worst = 0.0;
        for (const auto& [keys, a] : want) {
            const auto it = got.find(keys);
            if (it == got.end()) {
                same_set = false;
                continue;
            }
            worst = std::max(worst, std::abs(it->second - a) / std::max(1.0, std::abs(a)));
        }
        const auto beam1 = greedy_paths(ctx, {top, f, t}, {rounds, 1, false});
        const bool chain = beam1.back().keys() == en.argmax_chain(root, rounds).keys;
        ok = ok && same_set && worst <= 1e-6 && chain;
        detail += "(" + std::to_string(in.layers) + "L," + std::to_string(in.features) + "f," + std::to_string(in.tokens) +
                  "t): " + std::to_string(want.size()) + " paths" + (same_set ? "" : " SET MISMATCH") + ", worst " +
                  fmt("%.1e", worst) + (chain ? ", N=1 chain ok" : ", N=1 CHAIN MISMATCH") + "; ";
    }
    return {ok, detail};
}

// ---------------------------------------------------------------------------
// Conservation with error nodes, and idempotence

Outcome conservation() {
    const ModelParams p = fx::random_model(fx::tiny_config(2, 2, 8, 16, 20, 8, Activation::gelu), 505);
    const Coder c0 = fx::random_transcoder(0, 8, 16, 51), c1 = fx::random_transcoder(1, 8, 16, 52);
    double worst = 0.0;
    std::size_t nodes = 0, violations = 0;
    bool idempotent = true;
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto tokens = fx::random_tokens(5, 20, 5000 + s);
        const auto cache = forward_with_cache(p, tokens);
        const SearchContext ctx(p, cache, {{0, &c0}, {1, &c1}});
        const std::size_t t = tokens.size() - 1;
        const auto paths = greedy_paths(ctx, {1, first_active(ctx, 1, t), t}, {5, kUnlimited, false});
        CircuitGraph g = paths_to_graph(paths);
        add_error_nodes(g, ctx);
        std::map<NodeKey, double> incoming;
        for (const auto& [e, a] : g.edges) incoming[e.second] += a;
        for (const auto& [k, dsum] : g.direction_sums) {
            const double a = g.nodes.at(k);
            const double gap = std::abs(a - incoming[k]);
            worst = std::max(worst, gap / (std::abs(a) + 1e-12));
            if (gap > 1e-4 * std::abs(a) + 1e-6) ++violations;
            ++nodes;
        }

        auto doubled = paths;
        doubled.insert(doubled.end(), paths.begin(), paths.end());
        CircuitGraph g2 = paths_to_graph(doubled);
        add_error_nodes(g2, ctx);
        idempotent = idempotent && g2.nodes == g.nodes && g2.edges == g.edges && export_json(g2) == export_json(g);
    }
    return {violations == 0 && idempotent,
            std::to_string(nodes) + " expanded nodes, " + std::to_string(violations) + " violations, worst relative gap " +
                fmt("%.2e", worst) + (idempotent ? ", duplicate paths idempotent" : ", NOT idempotent")};
}

// ---------------------------------------------------------------------------
// De-embedding against brute force

Outcome deembedding(const ModelParams& p, const Coder& coder) {
    double worst = 0.0;
    bool order_ok = true;
    for (std::size_t f = 0; f < coder.d_features(); ++f) {
        const auto fe = coder.f_enc(f);
        const auto scores = deembedding_scores(fe, p.W_E);
        std::vector<std::pair<int, double>> brute;
        for (std::size_t v = 0; v < p.config.vocab_size; ++v) {
            double s = 0.0;
            for (std::size_t j = 0; j < fe.size(); ++j) s += static_cast<double>(p.W_E(v, j)) * fe[j];
            worst = std::max(worst, std::abs(scores[v] - s));
            brute.emplace_back(static_cast<int>(v), s);
        }
        std::stable_sort(brute.begin(), brute.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
        const auto top = deembed(fe, p.W_E, 10);
        for (std::size_t r = 0; r < top.size(); ++r)
            if (top[r].first != brute[r].first && std::abs(top[r].second - brute[r].second) > 1e-7) order_ok = false;
    }
    return {worst <= 1e-7 && order_ok, std::to_string(coder.d_features()) + " features x " +
                                           std::to_string(p.config.vocab_size) + " tokens, worst gap " + fmt("%.2e", worst) +
                                           (order_ok ? ", top-10 order matches" : ", TOP-10 ORDER DIFFERS")};
}

// ---------------------------------------------------------------------------
// Shared trained toy model

struct Toy {
    fx::TempDir dir{"acceptance"};
    Vocab vocab = Vocab::standard();
    std::string corpus, eval_corpus, model;
    ModelParams params;
};

bool build_toy(Toy& toy) {
    toy.corpus = toy.dir.file("corpus.txt");
    toy.eval_corpus = toy.dir.file("eval.txt");
    toy.model = toy.dir.file("model.tcw1");
    if (run_cli({"gen-corpus", "--seed", "1", "--n-tokens", "300000", "--out", toy.corpus}) != 0) return false;
    if (run_cli({"gen-corpus", "--seed", "2", "--n-tokens", "20000", "--out", toy.eval_corpus}) != 0) return false;
    if (run_cli({"train-model", "--corpus", toy.corpus, "--out", toy.model, "--steps", "3000", "--context", "16",
                 "--weight-decay", "0.1", "--linear-decay"}) != 0)
        return false;
    toy.params = load_model(toy.model);
    return true;
}

std::vector<std::string> sweep_args(const Toy& toy, const std::string& out) {
    return {"sweep", "--model", toy.model, "--corpus", toy.corpus, "--eval-corpus", toy.eval_corpus, "--layer", "0",
            "--limit", "100000", "--context-len", "16", "--lr", "3e-3", "--batch-size", "1024", "--total-tokens",
            "3000000", "--d-features-mult", "4", "--lambda1", "1e-4,1e-3,1e-2", "--out", out};
}

Outcome sweep_criterion(const std::string& csv) {
    const auto lines = split(csv, '\n');
    std::vector<double> l0;
    bool ordered = true;
    std::string detail;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        const auto f = split(lines[i], ',');
        if (f.size() < 6 || f[1] != "transcoder") continue;
        if (f[2].empty()) return {false, "run lambda1=" + f[0] + " failed"};
        const double L0 = std::stod(f[2]), orig = std::stod(f[3]), rep = std::stod(f[4]), mean = std::stod(f[5]);
        l0.push_back(L0);
        const bool ok = orig <= rep && rep <= mean;
        ordered = ordered && ok;
        detail += "lambda1=" + fmt("%g", std::stod(f[0])) + " L0=" + fmt("%.1f", L0) + " ce " + fmt("%.6f", orig) + "/" +
                  fmt("%.6f", rep) + "/" + fmt("%.4f", mean) + (ok ? "" : " (UNORDERED)") + "; ";
    }
    bool decreasing = l0.size() == 3;
    for (std::size_t i = 1; i < l0.size(); ++i) {
        const double drop = 1.0 - l0[i] / l0[i - 1];
        detail += "drop " + fmt("%.0f%%", 100 * drop) + "; ";
        decreasing = decreasing && drop >= 0.2;
    }
    return {ordered && decreasing, detail};
}

TrainConfig toy_coder_config() {
    TrainConfig c;
    c.lambda1 = 1e-3f;
    c.learning_rate = 1e-3f;
    c.batch_size = 1024;
    c.context_len = 16;
    c.total_tokens = 1'000'000;
    c.d_features_multiplier = 8;
    return c;
}

Outcome greater_than(const Toy& toy, const Coder& tc0, const Coder& tc1) {
    const ModelParams& p = toy.params;
    const YearTask task = YearTask::standard(toy.vocab);
    const double pd = mean_probability_difference(p, task);

    std::vector<MlpIntervention> with_coder(p.config.n_layers);
    with_coder[1].kind = MlpIntervention::Kind::coder;
    with_coder[1].coder = &tc1;
    const double pd_full = mean_probability_difference(p, task, with_coder);
    auto zeroed = with_coder;
    zeroed[1].keep.assign(tc1.d_features(), 0);
    const double pd_zero = mean_probability_difference(p, task, zeroed);

    std::vector<std::size_t> ks{0};
    for (std::size_t k = 1; k < tc1.d_features(); k *= 2) ks.push_back(k);
    ks.push_back(tc1.d_features());
    const AblationCurve curve = topk_ablation_curve(p, task, AblationUnit::transcoder_features, 1, &tc1, ks);
    const bool curve_ok = std::abs(curve.prob_diff.back() - pd_full) <= 1e-6 && std::abs(curve.prob_diff.front() - pd_zero) <= 1e-6;

    // Per-feature data for the highest-variance last-layer features: DLA on the
    // prompt where each fires hardest, and the weighted de-embedding through the
    // layer-1 head that attends most to the YY token.
    const std::size_t yy = task.prompts[0].size() - 3, last = task.prompts[0].size() - 1;
    std::vector<std::vector<float>> z(task.prompts.size());
    std::vector<double> att(p.config.n_heads, 0.0);
    for (std::size_t i = 0; i < task.prompts.size(); ++i) {
        const auto cache = forward_with_cache(p, task.prompts[i]);
        for (std::size_t f = 0; f < tc1.d_features(); ++f) z[i].push_back(feature_activation(cache, tc1, f, last));
        for (std::size_t h = 0; h < p.config.n_heads; ++h) att[h] += cache.layers[1].pattern[h](last, yy);
    }
    std::vector<std::pair<double, std::size_t>> by_var;
    for (std::size_t f = 0; f < tc1.d_features(); ++f) {
        double m = 0.0, v = 0.0;
        for (const auto& a : z) m += a[f];
        m /= static_cast<double>(z.size());
        for (const auto& a : z) v += (a[f] - m) * (a[f] - m);
        by_var.emplace_back(-v, f);
    }
    std::sort(by_var.begin(), by_var.end());
    const std::size_t head = static_cast<std::size_t>(std::max_element(att.begin(), att.end()) - att.begin());

    std::ostringstream fig;
    fig << "feature,yy,token_id,dla,deembedding\n";
    for (std::size_t r = 0; r < 3; ++r) {
        const std::size_t f = by_var[r].second;
        std::size_t best = 0;
        for (std::size_t i = 0; i < z.size(); ++i)
            if (z[i][f] > z[best][f]) best = i;
        const auto logit = dla(tc1, f, forward_with_cache(p, task.prompts[best]), last, p);
        const auto de = weighted_deembedding_scores(p, tc1, f, 1, head, tc0, 10);
        for (std::size_t y = 0; y < task.year_tokens.size(); ++y) {
            const int id = task.year_tokens[y];
            fig << f << ',' << y << ',' << id << ',' << fmt("%.9g", logit[id]) << ',' << fmt("%.9g", de[id]) << '\n';
        }
    }
    const std::string fig_path = toy.dir.file("greater_than_features.csv");
    std::ofstream(fig_path) << fig.str();
    const bool exported = split(slurp(fig_path), '\n').size() == 301;

    // detector: the highest-variance feature; its weighted de-embedding should rank years
    const std::size_t detector = by_var[0].second;
    const auto top20 = top_scores(weighted_deembedding_scores(p, tc1, detector, 1, head, tc0, 10), 20);
    const std::set<int> years(task.year_tokens.begin(), task.year_tokens.end());
    std::size_t year_hits = 0;
    for (const auto& [id, s] : top20) year_hits += years.count(id);
    const double base = static_cast<double>(years.size()) / static_cast<double>(p.config.vocab_size);
    const double share = static_cast<double>(year_hits) / static_cast<double>(top20.size());

    const bool ok = pd >= 0.5 && pd_full >= 0.8 * pd && curve_ok && year_hits > 0 && exported;
    std::string top3;
    for (std::size_t r = 0; r < 3; ++r) top3 += toy.vocab.token(top20[r].first) + (r < 2 ? " " : "");
    return {ok, "prob diff " + fmt("%.3f", pd) + ", transcoder " + fmt("%.3f", pd_full) + " (" +
                    fmt("%.1f%%", 100 * pd_full / pd) + "), curve k=all/k=0 " + fmt("%.6f", curve.prob_diff.back()) + "/" +
                    fmt("%.6f", curve.prob_diff.front()) + " vs " + fmt("%.6f", pd_full) + "/" + fmt("%.6f", pd_zero) +
                    ", detector mlp1tc[" + std::to_string(detector) + "] via attn1[" + std::to_string(head) +
                    "] top-20 years " + std::to_string(year_hits) + "/20 (share " + fmt("%.2f", share) + ", vocabulary base rate " + fmt("%.2f", base) + "), top-3 " + top3};
}

Outcome determinism(const Toy& toy, const std::string& csv_a, const std::string& csv_b, const Coder& coder) {
    const bool same_csv = !csv_a.empty() && csv_a == csv_b;
    const std::string m2 = toy.dir.file("model2.tcw1"), c1 = toy.dir.file("coder1.tcw1"), c2 = toy.dir.file("coder2.tcw1");
    save_checkpoint(load_model(toy.model), m2);
    save_checkpoint(coder, c1);
    const Coder back = load_coder(c1);
    save_checkpoint(back, c2);
    const ModelParams mp = load_model(m2);
    bool tensors = true;
    const auto a = mp.named_tensors(), b = toy.params.named_tensors();
    for (std::size_t i = 0; i < a.size(); ++i)
        tensors = tensors && std::equal(a[i].data.begin(), a[i].data.end(), b[i].data.begin(), b[i].data.end(),
                                        [](float x, float y) { return std::bit_cast<std::uint32_t>(x) == std::bit_cast<std::uint32_t>(y); });
    tensors = tensors && back.W_enc.data == coder.W_enc.data && back.W_dec.data == coder.W_dec.data &&
              back.b_enc == coder.b_enc && back.b_dec == coder.b_dec;
    const bool files = slurp(m2) == slurp(toy.model) && slurp(c1) == slurp(c2);
    return {same_csv && tensors && files, std::string(same_csv ? "sweep CSVs identical" : "SWEEP CSVs DIFFER") +
                                              (files ? ", re-saved checkpoints byte-identical" : ", CHECKPOINT BYTES DIFFER") +
                                              (tensors ? ", tensors bit-exact" : ", TENSORS DIFFER")};
}

} // namespace

int main() {
    int failed = 0;
    auto report = [&](const std::string& name, const std::function<Outcome()>& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (!o.pass) ++failed;
        std::cout << (o.pass ? "PASS " : "FAIL ") << name << " [" << fmt("%.1f", secs) << "s] " << o.detail << std::endl;
    };

    report("attribution completeness", completeness);
    report("factorization and gradient check", factorization);
    report("attention attribution", attention);
    report("greedy search oracle equivalence", oracle_equivalence);
    report("graph conservation with error nodes", conservation);

    Toy toy;
    bool toy_ok = false;
    std::string csv_a, csv_b;
    Coder tc0, tc1;
    {
        const auto t0 = std::chrono::steady_clock::now();
        toy_ok = build_toy(toy);
        if (toy_ok) {
            try {
                const TrainConfig cfg = toy_coder_config();
                tc0 = train_coder(cfg, harvest(toy.params, Corpus::load(toy.corpus, toy.vocab), 0, 100000), CoderKind::transcoder).coder;
                tc1 = train_coder(cfg, harvest(toy.params, Corpus::load(toy.corpus, toy.vocab), 1, 100000), CoderKind::transcoder).coder;
            } catch (const std::exception& e) {
                std::cerr << "coder training failed: " << e.what() << "\n";
                toy_ok = false;
            }
        }
        std::cerr << "toy model and transcoders ready in "
                  << fmt("%.1f", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) << "s\n";
    }
    auto need_toy = [&](const std::function<Outcome()>& fn) {
        return [&, fn] { return toy_ok ? fn() : Outcome{false, "toy model setup failed"}; };
    };

    report("sparsity-fidelity sweep", need_toy([&] {
        const std::string a = toy.dir.file("sweep_a.csv");
        if (run_cli(sweep_args(toy, a)) != 0) return Outcome{false, "tc sweep failed"};
        csv_a = slurp(a);
        return sweep_criterion(csv_a);
    }));
    report("greater-than toy study", need_toy([&] { return greater_than(toy, tc0, tc1); }));
    report("de-embedding oracle", need_toy([&] { return deembedding(toy.params, tc0); }));
    report("determinism", need_toy([&] {
        const std::string b = toy.dir.file("sweep_b.csv");
        if (run_cli(sweep_args(toy, b)) != 0) return Outcome{false, "second tc sweep failed"};
        csv_b = slurp(b);
        return determinism(toy, csv_a, csv_b, tc1);
    }));

    std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " of 9 criteria failed") << std::endl;
    return failed == 0 ? 0 : 1;
}
