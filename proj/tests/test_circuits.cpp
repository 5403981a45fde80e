#include <cmath>
#include <map>

#include "doctest.h"
#include "support/fixtures.hpp"
#include "support/oracle.hpp"
#include "tc/circuits.hpp"
#include "tc/error.hpp"

using namespace tc;

namespace {

struct Setup {
    ModelParams params;
    std::vector<Coder> coders;
    std::vector<int> tokens;
    ActivationCache cache;
    std::map<std::size_t, const Coder*> map;

    Setup(std::size_t layers, std::size_t d_features, std::size_t n_tokens, std::uint64_t seed, bool every_layer = true)
        : params(fx::random_model(fx::tiny_config(layers, 2, 8, 16, 20, 8), seed)),
          tokens(fx::random_tokens(n_tokens, 20, seed + 1)), cache(forward_with_cache(params, tokens)) {
        for (std::size_t l = 0; l < layers; ++l)
            if (every_layer || l + 1 == layers) coders.push_back(fx::random_transcoder(l, 8, d_features, seed * 10 + l));
        for (const auto& c : coders) map[c.layer] = &c;
    }
    Setup(const Setup&) = delete;
};

// An active feature of the top layer's coder at the last token.
std::size_t active_feature(const SearchContext& ctx, std::size_t layer, std::size_t token) {
    const Vec& z = ctx.z[layer][token];
    for (std::size_t i = 0; i < z.size(); ++i)
        if (z[i] > 0.0f) return i;
    return 0;
}

using PathMap = std::map<std::vector<NodeKey>, double>;

PathMap to_map(const std::vector<ComputationalPath>& paths) {
    PathMap m;
    for (const auto& p : paths) m[p.keys()] = p.last().attribution;
    return m;
}

PathMap to_map(const std::vector<oracle::OPath>& paths) {
    PathMap m;
    for (const auto& p : paths) m[p.keys] = p.attributions.back();
    return m;
}

PathNode node(NodeKey k, double a) {
    PathNode n;
    n.key = k;
    n.attribution = a;
    return n;
}

// For every expanded node: attribution minus the sum of edges into it.
double worst_closure(const CircuitGraph& g) {
    std::map<NodeKey, double> incoming;
    for (const auto& [e, a] : g.edges) incoming[e.second] += a;
    double worst = 0.0;
    for (const auto& [k, dsum] : g.direction_sums) {
        const double a = g.nodes.at(k);
        worst = std::max(worst, std::abs(a - incoming[k]) / (std::abs(a) + 1e-2));
    }
    return worst;
}

} // namespace

TEST_CASE("unpruned search equals the brute-force enumeration") {
    for (auto [layers, feats, ntok, every] : {std::tuple{2u, 8u, 4u, true}, std::tuple{2u, 8u, 3u, false}}) {
        Setup s(layers, feats, ntok, 5 + layers + ntok, every);
        const SearchContext ctx(s.params, s.cache, s.map);
        const std::size_t top = layers - 1, t = ntok - 1;
        const std::size_t f = active_feature(ctx, top, t);
        const std::size_t rounds = 2 * layers + 1;
        const auto got = to_map(greedy_paths(ctx, {top, f, t}, {rounds, kUnlimited, false}));
        const oracle::Enumerator en(s.params, s.tokens, s.map);
        const auto want = to_map(en.all_paths(en.root(top, f, t), rounds));
        CHECK(got.size() == want.size());
        double worst = 0.0;
        for (const auto& [keys, a] : want) {
            const auto it = got.find(keys);
            REQUIRE(it != got.end());
            worst = std::max(worst, std::abs(it->second - a) / std::max(1.0, std::abs(a)));
        }
        MESSAGE("paths " << want.size() << ", worst relative difference " << worst);
        CHECK(worst < 1e-6);
    }
}

TEST_CASE("beam of one follows the argmax chain") {
    Setup s(2, 8, 5, 21);
    const SearchContext ctx(s.params, s.cache, s.map);
    const std::size_t f = active_feature(ctx, 1, 4);
    const auto paths = greedy_paths(ctx, {1, f, 4}, {5, 1, false});
    const oracle::Enumerator en(s.params, s.tokens, s.map);
    const auto chain = en.argmax_chain(en.root(1, f, 4), 5);
    CHECK(paths.back().keys() == chain.keys);
    for (std::size_t i = 1; i < paths.size(); ++i) CHECK(paths[i].size() == i + 1);
    // the top-1 chain also appears without pruning
    const auto all = to_map(greedy_paths(ctx, {1, f, 4}, {5, kUnlimited, false}));
    CHECK(all.count(paths.back().keys()) == 1);
}

TEST_CASE("absolute ranking picks the largest magnitude") {
    Setup s(2, 8, 4, 8);
    const SearchContext ctx(s.params, s.cache, s.map);
    const std::size_t f = active_feature(ctx, 1, 3);
    const auto paths = greedy_paths(ctx, {1, f, 3}, {1, 1, true});
    REQUIRE(paths.size() == 2);
    double best = 0.0;
    for (const auto& c : candidate_nodes(ctx, paths[0].last())) best = std::max(best, std::abs(c.attribution));
    CHECK(std::abs(paths[1].last().attribution) == best);
}

TEST_CASE("search contract errors") {
    Setup s(2, 8, 4, 3);
    const SearchContext ctx(s.params, s.cache, s.map);
    CHECK_THROWS_AS(greedy_paths(ctx, {1, 0, 3}, {0, 1, false}), UsageError);
    CHECK_THROWS_AS(greedy_paths(ctx, {1, 0, 3}, {1, 0, false}), UsageError);
    CHECK_THROWS_AS(greedy_paths(ctx, {1, 99, 3}, {1, 1, false}), InputError);
    CHECK_THROWS_AS(greedy_paths(ctx, {1, 0, 9}, {1, 1, false}), InputError);
    Coder sae = Coder::zeros(CoderKind::sae, 0, 8, 8, 8);
    CHECK_THROWS_AS(SearchContext(s.params, s.cache, {{0, &sae}}), UsageError);
}

TEST_CASE("a one-layer model has no feature children") {
    Setup s(1, 8, 3, 4);
    const SearchContext ctx(s.params, s.cache, s.map);
    const auto paths = greedy_paths(ctx, {0, active_feature(ctx, 0, 2), 2}, {1, kUnlimited, false});
    for (std::size_t i = 1; i < paths.size(); ++i) CHECK(paths[i].last().key.kind != NodeKind::feature);
}

TEST_CASE("paths to graph") {
    const NodeKey A = NodeKey::feature(2, 3, 0), B = NodeKey::feature(1, 3, 5), C = NodeKey::feature(0, 3, 2),
                  D = NodeKey::embedding(3);
    const auto ab = ComputationalPath{}.extend(node(A, 1.0)).extend(node(B, 0.5));
    const auto abc = ab.extend(node(C, 0.25));
    const auto abd = ab.extend(node(D, 0.125));

    SUBCASE("a single path") {
        const auto g = paths_to_graph({abc});
        CHECK(g.nodes == std::map<NodeKey, double>{{A, 1.0}, {B, 0.5}, {C, 0.25}});
        CHECK(g.edges.size() == 2);
        CHECK(g.edges.at({B, A}) == 0.5);
        CHECK(g.edges.at({C, B}) == 0.25);
    }
    SUBCASE("a shared prefix counts once") {
        const auto g = paths_to_graph({abc, abd, ab});
        CHECK(g.nodes.at(B) == 0.5);
        CHECK(g.nodes.at(D) == 0.125);
    }
    SUBCASE("idempotence") {
        const auto once = paths_to_graph({abc, abd});
        const auto twice = paths_to_graph({abc, abd, abc, abd});
        CHECK(once.nodes == twice.nodes);
        CHECK(once.edges == twice.edges);
    }
    SUBCASE("mixed roots") {
        const auto other = ComputationalPath{}.extend(node(B, 1.0));
        CHECK_THROWS_AS(paths_to_graph({abc, other}), UsageError);
    }
}

TEST_CASE("full expansion closes on exact-copy transcoders") {
    const ModelParams p = fx::random_model(fx::tiny_config(2, 2, 8, 16, 20, 8), 41);
    const Coder c0 = exact_copy_transcoder(p, 0), c1 = exact_copy_transcoder(p, 1);
    const auto tokens = fx::random_tokens(4, 20, 3);
    const auto cache = forward_with_cache(p, tokens);
    const SearchContext ctx(p, cache, {{0, &c0}, {1, &c1}});
    const std::size_t f = active_feature(ctx, 1, 3);
    auto g = paths_to_graph(greedy_paths(ctx, {1, f, 3}, {5, kUnlimited, false}));
    CHECK(worst_closure(g) < 1e-4);
    add_error_nodes(g, ctx);
    for (const auto& e : g.errors) CHECK(std::abs(e.attribution) < 1e-4);
    CHECK_THROWS_AS(add_error_nodes(g, ctx), UsageError);
}

TEST_CASE("error nodes close the sums for imperfect transcoders") {
    Setup s(2, 16, 4, 13);
    const SearchContext ctx(s.params, s.cache, s.map);
    const std::size_t f = active_feature(ctx, 1, 3);
    auto g = paths_to_graph(greedy_paths(ctx, {1, f, 3}, {5, kUnlimited, false}));
    const double before = worst_closure(g);
    add_error_nodes(g, ctx);
    const double after = worst_closure(g);
    MESSAGE("closure before " << before << ", after " << after);
    CHECK(before > 1e-2);
    std::map<NodeKey, double> incoming;
    for (const auto& [e, a] : g.edges) incoming[e.second] += a;
    for (const auto& [k, dsum] : g.direction_sums) {
        const double a = g.nodes.at(k);
        CHECK(std::abs(a - incoming[k]) <= 1e-4 * std::abs(a) + 1e-6);
    }
}

TEST_CASE("a zero transcoder's error carries the whole MLP") {
    Setup s(2, 8, 3, 17);
    Coder zero = Coder::zeros(CoderKind::transcoder, 0, 8, 8, 8);
    const SearchContext ctx(s.params, s.cache, {{0, &zero}, {1, s.map.at(1)}});
    const PathNode root = root_node(ctx, {1, 0, 2});
    const auto paths = std::vector<ComputationalPath>{ComputationalPath{}.extend(root).extend(node(NodeKey::embedding(2), 0.0))};
    auto g = paths_to_graph(paths);
    add_error_nodes(g, ctx);
    REQUIRE(g.errors.size() == 1);
    double ref = 0.0;
    for (std::size_t j = 0; j < 8; ++j) ref += static_cast<double>((*root.direction)[j]) * s.cache.layers[0].mlp_out(2, j);
    CHECK(g.errors[0].attribution == doctest::Approx(ref).epsilon(1e-6));
    CHECK(g.errors[0].error == NodeKey::error(0, 2, kErrorTranscoder));
}

TEST_CASE("export") {
    SUBCASE("empty graph") { CHECK(export_dot(CircuitGraph{}) == "digraph circuit {\n}\n"); }
    SUBCASE("one edge") {
        const auto path = ComputationalPath{}.extend(node(NodeKey::feature(1, 2, 7), 1.5)).extend(node(NodeKey::head(0, 1, 0, 2), 0.75));
        const std::string dot = export_dot(paths_to_graph({path}));
        CHECK(dot.find("\"mlp1tc[7]@2\" [label=\"mlp1tc[7]@2\\n1.5\", peripheries=2];") != std::string::npos);
        CHECK(dot.find("\"attn0[1]@0>2\" -> \"mlp1tc[7]@2\" [label=\"0.75\"];") != std::string::npos);
        CHECK(std::count(dot.begin(), dot.end(), '\n') == 6);
    }
    SUBCASE("JSON round trip is byte identical") {
        Setup s(2, 8, 4, 9);
        const SearchContext ctx(s.params, s.cache, s.map);
        auto g = paths_to_graph(greedy_paths(ctx, {1, active_feature(ctx, 1, 3), 3}, {3, 4, false}));
        add_error_nodes(g, ctx);
        const std::string a = export_json(g);
        const std::string b = export_json(graph_from_json(nlohmann::json::parse(a)));
        CHECK(a == b);
        const auto j = nlohmann::json::parse(a);
        CHECK(j.contains("root"));
        CHECK(j["nodes"].size() == g.nodes.size());
        CHECK_THROWS_AS(graph_from_json(nlohmann::json::parse(R"({"nodes":[{"id":"x"}]})")), FormatError);
    }
}
