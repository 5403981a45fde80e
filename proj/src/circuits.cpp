#include "tc/circuits.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <tuple>

#include "tc/error.hpp"
#include "tc/kernels.hpp"
#include "tc/parallel.hpp"

namespace tc {

std::string to_string(NodeKind kind) {
    switch (kind) {
    case NodeKind::feature: return "transcoder_feature";
    case NodeKind::head: return "attention_head_source";
    case NodeKind::embedding: return "embedding";
    case NodeKind::bias: return "bias";
    case NodeKind::error: return "error";
    }
    return "?";
}

NodeKind node_kind_from_string(const std::string& s) {
    for (auto k : {NodeKind::feature, NodeKind::head, NodeKind::embedding, NodeKind::bias, NodeKind::error}) {
        if (to_string(k) == s) return k;
    }
    throw FormatError("unknown node kind '" + s + "'");
}

namespace {

std::uint32_t u32(std::size_t v) { return static_cast<std::uint32_t>(v); }

} // namespace

NodeKey NodeKey::feature(std::size_t layer, std::size_t token, std::size_t i) {
    return {NodeKind::feature, u32(layer), u32(token), u32(i), 0};
}
NodeKey NodeKey::head(std::size_t layer, std::size_t head, std::size_t source, std::size_t dest) {
    return {NodeKind::head, u32(layer), u32(source), u32(head), u32(dest)};
}
NodeKey NodeKey::embedding(std::size_t token) { return {NodeKind::embedding, 0, u32(token), 0, 0}; }
NodeKey NodeKey::bias(std::size_t layer, std::size_t token, std::uint32_t code) {
    return {NodeKind::bias, u32(layer), u32(token), code, 0};
}
NodeKey NodeKey::error(std::size_t layer, std::size_t token, std::uint32_t code) {
    return {NodeKind::error, u32(layer), u32(token), code, 0};
}

std::strong_ordering NodeKey::operator<=>(const NodeKey& o) const {
    return std::tie(layer, token, kind, index, aux) <=> std::tie(o.layer, o.token, o.kind, o.index, o.aux);
}

std::string node_label(const NodeKey& k) {
    const std::string L = std::to_string(k.layer), T = std::to_string(k.token), I = std::to_string(k.index);
    switch (k.kind) {
    case NodeKind::feature: return "mlp" + L + "tc[" + I + "]@" + T;
    case NodeKind::head: return "attn" + L + "[" + I + "]@" + T;
    case NodeKind::embedding: return "embed@" + T;
    case NodeKind::bias:
        if (k.index == kBiasDecoder) return "mlp" + L + "tc.b_dec@" + T;
        if (k.index == kBiasMlpInput) return "ln2." + L + ".const@" + T;
        return "ln1." + L + ".const@" + T;
    case NodeKind::error: return (k.index == kErrorTranscoder ? "mlp" + L + "tc.err@" : "mlp" + L + "@") + T;
    }
    return "?";
}

std::string node_id(const NodeKey& k) {
    if (k.kind == NodeKind::head) return node_label(k) + ">" + std::to_string(k.aux);
    return node_label(k);
}

const PathNode& ComputationalPath::root() const {
    const PathCell* c = tail.get();
    while (c->parent) c = c->parent.get();
    return c->node;
}

std::vector<PathNode> ComputationalPath::nodes() const {
    std::vector<PathNode> out;
    for (const PathCell* c = tail.get(); c; c = c->parent.get()) out.push_back(c->node);
    std::reverse(out.begin(), out.end());
    return out;
}

std::vector<NodeKey> ComputationalPath::keys() const {
    std::vector<NodeKey> out;
    for (const PathCell* c = tail.get(); c; c = c->parent.get()) out.push_back(c->node.key);
    std::reverse(out.begin(), out.end());
    return out;
}

ComputationalPath ComputationalPath::extend(PathNode node) const {
    auto cell = std::make_shared<PathCell>();
    cell->node = std::move(node);
    cell->parent = tail;
    cell->length = size() + 1;
    return {std::move(cell)};
}

SearchContext::SearchContext(const ModelParams& p, const ActivationCache& c, std::map<std::size_t, const Coder*> cs)
    : params(&p), cache(&c), coders(std::move(cs)) {
    const std::size_t T = c.n_tokens();
    z.resize(p.config.n_layers);
    for (const auto& [layer, coder] : coders) {
        if (!coder) throw UsageError("search: null coder for layer " + std::to_string(layer));
        if (layer >= p.config.n_layers || coder->layer != layer) {
            throw ConfigError("search: coder for layer " + std::to_string(layer) + " does not fit the model");
        }
        if (coder->kind != CoderKind::transcoder) throw UsageError("search: circuits need transcoders, not SAEs");
        if (coder->d_in() != p.config.d_model || coder->d_out() != p.config.d_model) {
            throw ConfigError("search: coder width does not match d_model");
        }
        z[layer].assign(T, Vec(coder->d_features()));
        for (std::size_t t = 0; t < T; ++t) coder_encode(*coder, c.layers[layer].mlp_in.row(t), z[layer][t]);
    }
}

const Coder* SearchContext::coder(std::size_t layer) const {
    const auto it = coders.find(layer);
    return it == coders.end() ? nullptr : it->second;
}

namespace {

bool heads_feed(std::size_t layer, const ResidualPoint& p) {
    return p.stage == Stage::final || (p.stage == Stage::mid ? layer <= p.layer : layer < p.layer);
}

bool mlp_feeds(std::size_t layer, const ResidualPoint& p) { return p.stage == Stage::final || layer < p.layer; }

PathNode make_feature_node(const SearchContext& ctx, std::size_t layer, std::size_t token, std::size_t i, double attribution,
                           float inv) {
    const Coder& c = *ctx.coder(layer);
    PulledBackFeature pf;
    const auto enc = c.f_enc(i);
    pf.direction.assign(enc.begin(), enc.end());
    if (inv != 1.0f) kernels::scale(inv, pf.direction);
    pf.origin = FeatureHandle{layer, i, token};
    LnPullback lp = apply_ln_scale(pf, *ctx.params, *ctx.cache, LnSite::mlp, layer, token);
    PathNode n;
    n.key = NodeKey::feature(layer, token, i);
    n.attribution = attribution;
    n.active = ctx.z[layer][token][i] > 0.0f;
    n.point = {layer, token, Stage::mid};
    n.direction = std::make_shared<const Vec>(std::move(lp.feature.direction));
    n.constant = lp.constant;
    return n;
}

} // namespace

PathNode root_node(const SearchContext& ctx, const FeatureHandle& root) {
    const Coder* c = ctx.coder(root.layer);
    if (!c) throw InputError("trace: no transcoder for layer " + std::to_string(root.layer));
    if (root.feature >= c->d_features()) throw InputError("trace: feature " + std::to_string(root.feature) + " out of range");
    if (root.token >= ctx.cache->n_tokens()) throw InputError("trace: token " + std::to_string(root.token) + " out of range");
    const double a = kernels::dot_f64(c->f_enc(root.feature), ctx.cache->layers[root.layer].mlp_in.row(root.token));
    return make_feature_node(ctx, root.layer, root.token, root.feature, a, 1.0f);
}

std::vector<PathNode> candidate_nodes(const SearchContext& ctx, const PathNode& node) {
    std::vector<PathNode> out;
    if (node.key.terminal() || !node.direction) return out;
    const ModelParams& params = *ctx.params;
    const ActivationCache& cache = *ctx.cache;
    const ResidualPoint& P = node.point;
    const std::size_t t = P.token;
    const Vec& d = *node.direction;

    auto leaf = [&](NodeKey key, double a) {
        PathNode n;
        n.key = key;
        n.attribution = a;
        n.point = P;
        out.push_back(std::move(n));
    };

    leaf(NodeKey::embedding(t), kernels::dot_f64(d, cache.layers[0].x_pre.row(t)));

    for (std::size_t l = 0; l < params.config.n_layers; ++l) {
        if (heads_feed(l, P)) {
            for (std::size_t h = 0; h < params.config.n_heads; ++h) {
                for (std::size_t s = 0; s <= t; ++s) {
                    HeadAttribution ha = attention_attribution(params, cache, l, h, s, t, d, P);
                    LnPullback lp = apply_ln_scale(ha.feature, params, cache, LnSite::attn, l, s);
                    PathNode n;
                    n.key = NodeKey::head(l, h, s, t);
                    n.attribution = ha.value;
                    n.point = {l, s, Stage::pre};
                    n.direction = std::make_shared<const Vec>(std::move(lp.feature.direction));
                    n.constant = lp.constant;
                    out.push_back(std::move(n));
                }
            }
        }
        if (!mlp_feeds(l, P)) continue;
        if (const Coder* c = ctx.coder(l)) {
            const Vec& z = ctx.z[l][t];
            for (std::size_t i = 0; i < z.size(); ++i) {
                if (!(z[i] > 0.0f)) continue;
                const float inv = invariant_factor(c->f_dec(i), d);
                PathNode n = make_feature_node(ctx, l, t, i, static_cast<double>(z[i]) * static_cast<double>(inv), inv);
                n.constant += static_cast<double>(inv) * static_cast<double>(c->b_enc[i]);
                out.push_back(std::move(n));
            }
            leaf(NodeKey::bias(l, t, kBiasDecoder), kernels::dot_f64(d, c->b_dec));
        } else {
            leaf(NodeKey::error(l, t, kErrorMlp), kernels::dot_f64(d, cache.layers[l].mlp_out.row(t)));
        }
    }

    if (P.stage != Stage::final) {
        leaf(NodeKey::bias(P.layer, t, P.stage == Stage::mid ? kBiasMlpInput : kBiasAttnInput), node.constant);
    }
    return out;
}

namespace {

double rank_score(const PathNode& n, bool rank_abs) { return rank_abs ? std::abs(n.attribution) : n.attribution; }

// Ties: ascending key of the last node, then of each earlier node.
bool path_before(const ComputationalPath& a, const ComputationalPath& b, bool rank_abs) {
    const double sa = rank_score(a.last(), rank_abs), sb = rank_score(b.last(), rank_abs);
    if (sa != sb) return sa > sb;
    const PathCell* x = a.tail.get();
    const PathCell* y = b.tail.get();
    while (x && y) {
        if (x->node.key != y->node.key) return x->node.key < y->node.key;
        x = x->parent.get();
        y = y->parent.get();
    }
    return (x == nullptr) && (y != nullptr);
}

} // namespace

std::vector<ComputationalPath> greedy_paths(const SearchContext& ctx, const FeatureHandle& root,
                                            const GreedyOptions& options) {
    if (options.depth == 0 || options.beam == 0) throw UsageError("greedy_paths: L and N must be at least 1");
    ComputationalPath start = ComputationalPath{}.extend(root_node(ctx, root));
    std::vector<ComputationalPath> out{start};
    std::vector<ComputationalPath> live{start};

    for (std::size_t round = 0; round < options.depth && !live.empty(); ++round) {
        std::vector<std::vector<ComputationalPath>> grown(live.size());
        parallel_for(live.size(), [&](std::size_t p) {
            std::vector<PathNode> cands = candidate_nodes(ctx, live[p].last());
            std::sort(cands.begin(), cands.end(), [&](const PathNode& a, const PathNode& b) {
                const double sa = rank_score(a, options.rank_abs), sb = rank_score(b, options.rank_abs);
                if (sa != sb) return sa > sb;
                return a.key < b.key;
            });
            if (cands.size() > options.beam) cands.resize(options.beam);
            grown[p].reserve(cands.size());
            for (auto& c : cands) grown[p].push_back(live[p].extend(std::move(c)));
        });
        std::vector<ComputationalPath> next;
        for (auto& g : grown) next.insert(next.end(), std::make_move_iterator(g.begin()), std::make_move_iterator(g.end()));
        std::sort(next.begin(), next.end(),
                  [&](const ComputationalPath& a, const ComputationalPath& b) { return path_before(a, b, options.rank_abs); });
        if (next.size() > options.beam) next.resize(options.beam);

        live.clear();
        for (auto& p : next) {
            if (!p.last().key.terminal()) live.push_back(p);
            out.push_back(std::move(p));
        }
    }
    return out;
}

void add_paths(CircuitGraph& g, const std::vector<ComputationalPath>& paths) {
    for (const auto& path : paths) {
        if (path.size() == 0) continue;
        const PathNode& r = path.root();
        if (!g.has_root) {
            g.root = r.key;
            g.has_root = true;
        } else if (r.key != g.root) {
            throw UsageError("paths_to_graph: paths have different roots (" + node_id(g.root) + " vs " + node_id(r.key) + ")");
        }
    }
    for (const auto& path : paths) {
        std::size_t prefix = 0;
        const PathNode* prev = nullptr;
        for (const PathNode& n : path.nodes()) {
            const auto [it, inserted] = g.prefixes.try_emplace({prefix, n.key}, g.prefixes.size() + 1);
            if (inserted) {
                g.nodes[n.key] += n.attribution;
                g.active[n.key] = n.active;
                if (prev) {
                    g.edges[{n.key, prev->key}] += n.attribution;
                    // the parent prefix is expanded the first time it gains a child
                    if (g.expanded_prefixes.insert(prefix).second && prev->direction) {
                        Vec& sum = g.direction_sums[prev->key];
                        if (sum.empty()) sum.assign(prev->direction->size(), 0.0f);
                        kernels::axpy(1.0f, *prev->direction, sum);
                        g.points[prev->key] = prev->point;
                    }
                }
            }
            prefix = it->second;
            prev = &n;
        }
    }
}

CircuitGraph paths_to_graph(const std::vector<ComputationalPath>& paths) {
    CircuitGraph g;
    add_paths(g, paths);
    return g;
}

void add_error_nodes(CircuitGraph& g, const SearchContext& ctx) {
    if (g.errors_added) throw UsageError("add_error_nodes: error nodes were already added");
    const ActivationCache& cache = *ctx.cache;
    std::map<std::pair<std::size_t, std::size_t>, Vec> residuals; // (layer, token) -> mlp_out - tc_out
    std::vector<GraphError> found;
    for (const auto& [key, dsum] : g.direction_sums) {
        const ResidualPoint& P = g.points.at(key);
        if (P.token >= cache.n_tokens()) throw ConfigError("add_error_nodes: graph does not match the cache");
        for (const auto& [layer, coder] : ctx.coders) {
            if (!mlp_feeds(layer, P)) continue;
            auto [it, fresh] = residuals.try_emplace({layer, P.token});
            if (fresh) {
                Vec recon(coder->d_out());
                coder_decode(*coder, ctx.z[layer][P.token], recon);
                const auto out = cache.layers[layer].mlp_out.row(P.token);
                it->second.resize(recon.size());
                for (std::size_t j = 0; j < recon.size(); ++j) it->second[j] = out[j] - recon[j];
            }
            if (dsum.size() != it->second.size()) throw ConfigError("add_error_nodes: direction width mismatch");
            found.push_back({NodeKey::error(layer, P.token, kErrorTranscoder), key, kernels::dot_f64(dsum, it->second)});
        }
    }
    std::sort(found.begin(), found.end(), [](const GraphError& a, const GraphError& b) {
        return std::tie(a.consumer, a.error) < std::tie(b.consumer, b.error);
    });
    for (const auto& e : found) {
        g.nodes[e.error] += e.attribution;
        g.active[e.error] = true;
        g.edges[{e.error, e.consumer}] += e.attribution;
    }
    g.errors = std::move(found);
    g.errors_added = true;
}

nlohmann::json graph_to_json(const CircuitGraph& g) {
    using nlohmann::json;
    json j;
    j["root"] = g.has_root ? json(node_id(g.root)) : json(nullptr);
    json nodes = json::array();
    for (const auto& [k, a] : g.nodes) {
        const auto act = g.active.find(k);
        nodes.push_back({{"id", node_id(k)},
                         {"kind", to_string(k.kind)},
                         {"label", node_label(k)},
                         {"layer", k.layer},
                         {"token", k.token},
                         {"index", k.index},
                         {"aux", k.aux},
                         {"attribution", a},
                         {"active", act == g.active.end() ? true : act->second}});
    }
    j["nodes"] = std::move(nodes);
    json edges = json::array();
    for (const auto& [e, a] : g.edges) edges.push_back({{"src", node_id(e.first)}, {"dst", node_id(e.second)}, {"attribution", a}});
    j["edges"] = std::move(edges);
    json errors = json::array();
    for (const auto& e : g.errors) {
        errors.push_back({{"id", node_id(e.error)},
                          {"consumer", node_id(e.consumer)},
                          {"layer", e.error.layer},
                          {"token", e.error.token},
                          {"attribution", e.attribution}});
    }
    j["errors"] = std::move(errors);
    return j;
}

CircuitGraph graph_from_json(const nlohmann::json& j) {
    CircuitGraph g;
    std::map<std::string, NodeKey> ids;
    try {
        for (const auto& n : j.at("nodes")) {
            NodeKey k{node_kind_from_string(n.at("kind").get<std::string>()), n.at("layer").get<std::uint32_t>(),
                      n.at("token").get<std::uint32_t>(), n.at("index").get<std::uint32_t>(),
                      n.at("aux").get<std::uint32_t>()};
            const std::string id = n.at("id").get<std::string>();
            if (node_id(k) != id) throw FormatError("graph json: node id '" + id + "' does not match its fields");
            ids[id] = k;
            g.nodes[k] = n.at("attribution").get<double>();
            g.active[k] = n.at("active").get<bool>();
        }
        auto lookup = [&](const std::string& id) {
            const auto it = ids.find(id);
            if (it == ids.end()) throw FormatError("graph json: unknown node '" + id + "'");
            return it->second;
        };
        if (!j.at("root").is_null()) {
            g.root = lookup(j.at("root").get<std::string>());
            g.has_root = true;
        }
        for (const auto& e : j.at("edges")) {
            g.edges[{lookup(e.at("src").get<std::string>()), lookup(e.at("dst").get<std::string>())}] =
                e.at("attribution").get<double>();
        }
        for (const auto& e : j.at("errors")) {
            g.errors.push_back({lookup(e.at("id").get<std::string>()), lookup(e.at("consumer").get<std::string>()),
                                e.at("attribution").get<double>()});
        }
        g.errors_added = !g.errors.empty();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("graph json: ") + e.what());
    }
    return g;
}

std::string export_json(const CircuitGraph& g) { return graph_to_json(g).dump(2) + "\n"; }

namespace {

std::string num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

} // namespace

std::string export_dot(const CircuitGraph& g) {
    std::string out = "digraph circuit {\n";
    if (!g.nodes.empty()) out += "  rankdir=LR;\n";
    for (const auto& [k, a] : g.nodes) {
        out += "  \"" + node_id(k) + "\" [label=\"" + node_label(k) + "\\n" + num(a) + "\"";
        if (k.terminal()) out += ", shape=box";
        if (g.has_root && k == g.root) out += ", peripheries=2";
        out += "];\n";
    }
    for (const auto& [e, a] : g.edges) {
        out += "  \"" + node_id(e.first) + "\" -> \"" + node_id(e.second) + "\" [label=\"" + num(a) + "\"];\n";
    }
    out += "}\n";
    return out;
}

} // namespace tc
