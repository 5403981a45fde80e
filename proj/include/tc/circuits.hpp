#pragma once

#include <compare>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "tc/attribution.hpp"
#include "tc/coder.hpp"
#include "tc/model.hpp"

namespace tc {

enum class NodeKind : std::uint8_t { feature, head, embedding, bias, error };

std::string to_string(NodeKind kind);
NodeKind node_kind_from_string(const std::string& s);

// Bias node codes.
inline constexpr std::uint32_t kBiasDecoder = 0;   // b_dec of a transcoder, read directly
inline constexpr std::uint32_t kBiasMlpInput = 1;  // LN2 bias (and b_enc) seen by a feature
inline constexpr std::uint32_t kBiasAttnInput = 2; // LN1 bias seen through a head's OV circuit
// Error node codes.
inline constexpr std::uint32_t kErrorTranscoder = 0; // MLP output minus transcoder output
inline constexpr std::uint32_t kErrorMlp = 1;        // a whole MLP with no transcoder

// Identity of a graph node.
//   feature:   layer, token, index = feature
//   head:      layer, token = source, index = head, aux = destination
//   embedding: token
//   bias:      layer, token, index = code
//   error:     layer, token, index = code
// Ordered by (layer, token, kind, index, aux).
struct NodeKey {
    NodeKind kind = NodeKind::feature;
    std::uint32_t layer = 0;
    std::uint32_t token = 0;
    std::uint32_t index = 0;
    std::uint32_t aux = 0;

    static NodeKey feature(std::size_t layer, std::size_t token, std::size_t i);
    static NodeKey head(std::size_t layer, std::size_t head, std::size_t source, std::size_t dest);
    static NodeKey embedding(std::size_t token);
    static NodeKey bias(std::size_t layer, std::size_t token, std::uint32_t code);
    static NodeKey error(std::size_t layer, std::size_t token, std::uint32_t code);

    bool terminal() const { return kind == NodeKind::embedding || kind == NodeKind::bias || kind == NodeKind::error; }

    bool operator==(const NodeKey&) const = default;
    std::strong_ordering operator<=>(const NodeKey& o) const;
};

// Stable identifier used in exports, e.g. "mlp1tc[7]@3" or "attn0[1]@2>4".
std::string node_id(const NodeKey& key);
// Display label in the compact notation, e.g. "mlp1tc[7]@3" or "attn0[1]@2".
std::string node_label(const NodeKey& key);

struct PathNode {
    NodeKey key;
    double attribution = 0.0;
    bool active = true;
    // Non-terminal nodes carry the pulled-back direction on the residual
    // stream at `point` and the constant term of that pullback.
    ResidualPoint point;
    std::shared_ptr<const Vec> direction;
    double constant = 0.0;
};

struct PathCell {
    PathNode node;
    std::shared_ptr<const PathCell> parent;
    std::size_t length = 1;
};

// Root first (latest layer), each later node one hop further back. Paths
// share their prefixes.
struct ComputationalPath {
    std::shared_ptr<const PathCell> tail;

    std::size_t size() const { return tail ? tail->length : 0; }
    const PathNode& last() const { return tail->node; }
    const PathNode& root() const;
    std::vector<PathNode> nodes() const;
    std::vector<NodeKey> keys() const;
    ComputationalPath extend(PathNode node) const;
};

inline constexpr std::size_t kUnlimited = std::numeric_limits<std::size_t>::max();

// Precomputed per-prompt data shared by every expansion step.
struct SearchContext {
    const ModelParams* params = nullptr;
    const ActivationCache* cache = nullptr;
    std::map<std::size_t, const Coder*> coders; // transcoders by layer
    std::vector<std::vector<Vec>> z;            // [layer][token] coder activations (empty without a coder)

    SearchContext(const ModelParams& params, const ActivationCache& cache, std::map<std::size_t, const Coder*> coders);
    const Coder* coder(std::size_t layer) const;
};

/// The root node: the transcoder feature's pre-activation minus b_enc, with
/// its direction pulled back through LN2. InputError on out-of-range indices.
PathNode root_node(const SearchContext& ctx, const FeatureHandle& root);

/// Every child of a non-terminal node: the embedding, each head source, each
/// active lower transcoder feature, each lower b_dec, an error leaf for each
/// lower MLP without a transcoder, and the node's own constant. Their
/// attributions sum to the node's attribution.
std::vector<PathNode> candidate_nodes(const SearchContext& ctx, const PathNode& node);

struct GreedyOptions {
    std::size_t depth = 1;        // L, number of extension rounds
    std::size_t beam = kUnlimited; // N, kept per path and globally per round
    bool rank_abs = false;         // rank by |attribution| instead of the signed value
};

/// Greedy computational-path search. Returns the root-only path followed by
/// every path kept in any round, in round order.
std::vector<ComputationalPath> greedy_paths(const SearchContext& ctx, const FeatureHandle& root,
                                            const GreedyOptions& options);

struct GraphError {
    NodeKey error;
    NodeKey consumer;
    double attribution = 0.0;
};

struct CircuitGraph {
    NodeKey root;
    bool has_root = false;
    std::map<NodeKey, double> nodes;
    std::map<std::pair<NodeKey, NodeKey>, double> edges; // (child, parent)
    std::map<NodeKey, bool> active;
    std::vector<GraphError> errors;
    bool errors_added = false;

    // Interned prefixes: (parent prefix id, key) -> id; id 0 is the empty prefix.
    std::map<std::pair<std::size_t, NodeKey>, std::size_t> prefixes;
    std::set<std::size_t> expanded_prefixes;
    // Sum of pulled-back directions over distinct expanded prefixes of each node.
    std::map<NodeKey, Vec> direction_sums;
    std::map<NodeKey, ResidualPoint> points;
};

/// Merges paths into a graph counting each distinct prefix once. UsageError
/// when the paths do not share one root.
CircuitGraph paths_to_graph(const std::vector<ComputationalPath>& paths);
void add_paths(CircuitGraph& graph, const std::vector<ComputationalPath>& paths);

/// Adds one error node per (transcoder layer, token) below every expanded
/// node, carrying direction . (MLP output - transcoder output).
void add_error_nodes(CircuitGraph& graph, const SearchContext& ctx);

nlohmann::json graph_to_json(const CircuitGraph& graph);
CircuitGraph graph_from_json(const nlohmann::json& j);
std::string export_json(const CircuitGraph& graph);
std::string export_dot(const CircuitGraph& graph);

} // namespace tc
