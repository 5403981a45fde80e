#include "tc/service.hpp"

#include <charconv>
#include <optional>
#include <vector>

#include "httplib.h"
#include "tc/attribution.hpp"
#include "tc/error.hpp"
#include "tc/eval.hpp"

namespace tc {

namespace {

using nlohmann::json;

struct HttpError {
    int status;
    std::string code;
    std::string message;
};

[[noreturn]] void bad_request(const std::string& msg) { throw HttpError{400, "bad_request", msg}; }
[[noreturn]] void not_found(const std::string& msg) { throw HttpError{404, "not_found", msg}; }

std::size_t parse_index(const std::string& s, const std::string& what) {
    std::size_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || ec != std::errc() || p != s.data() + s.size()) bad_request(what + " must be a non-negative integer");
    return v;
}

std::optional<std::string> param(const std::map<std::string, std::string>& q, const std::string& key) {
    const auto it = q.find(key);
    if (it == q.end()) return std::nullopt;
    return it->second;
}

std::size_t query_index(const std::map<std::string, std::string>& q, const std::string& key, std::optional<std::size_t> def) {
    const auto v = param(q, key);
    if (!v) {
        if (!def) bad_request("missing query parameter '" + key + "'");
        return *def;
    }
    return parse_index(*v, key);
}

bool query_bool(const std::map<std::string, std::string>& q, const std::string& key, bool def) {
    const auto v = param(q, key);
    if (!v) return def;
    if (*v == "1" || *v == "true") return true;
    if (*v == "0" || *v == "false") return false;
    bad_request(key + " must be true or false");
}

std::size_t body_index(const json& j, const std::string& key, std::optional<std::size_t> def = std::nullopt) {
    if (!j.contains(key)) {
        if (!def) bad_request("missing field '" + key + "'");
        return *def;
    }
    const json& v = j.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) bad_request("field '" + key + "' must be a non-negative integer");
    return v.get<std::size_t>();
}

bool body_bool(const json& j, const std::string& key, bool def) {
    if (!j.contains(key)) return def;
    if (!j.at(key).is_boolean()) bad_request("field '" + key + "' must be a boolean");
    return j.at(key).get<bool>();
}

json parse_body(const std::string& body) {
    json j = json::parse(body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) bad_request("request body must be a JSON object");
    return j;
}

const Coder& coder_at(const Session& s, std::size_t layer) {
    const auto it = s.coders.find(layer);
    if (it == s.coders.end()) not_found("no coder loaded for layer " + std::to_string(layer));
    return it->second;
}

void check_feature(const Coder& c, std::size_t feature) {
    if (feature >= c.d_features()) not_found("feature " + std::to_string(feature) + " does not exist");
}

json token_scores(const Session& s, const std::vector<std::pair<int, double>>& ranked) {
    json out = json::array();
    for (std::size_t r = 0; r < ranked.size(); ++r) {
        json e = {{"rank", r + 1}, {"token_id", ranked[r].first}, {"score", ranked[r].second}};
        if (!s.blind && static_cast<std::size_t>(ranked[r].first) < s.vocab.size()) e["text"] = s.vocab.token(ranked[r].first);
        out.push_back(std::move(e));
    }
    return out;
}

json get_prompts(const Session& s) {
    json list = json::array();
    for (std::size_t p = 0; p < s.corpus.prompts.size(); ++p) {
        const auto& toks = s.corpus.prompts[p];
        json e = {{"id", p}, {"length", toks.size()}};
        if (!s.blind) {
            e["tokens"] = toks;
            e["text"] = s.vocab.detokenize(toks);
        }
        list.push_back(std::move(e));
    }
    return {{"prompts", std::move(list)}, {"blind", s.blind}};
}

json get_deembed(const Session& s, std::size_t layer, std::size_t feature, const std::map<std::string, std::string>& q) {
    const Coder& c = coder_at(s, layer);
    check_feature(c, feature);
    const std::size_t k = query_index(q, "k", 10);
    return {{"layer", layer}, {"feature", feature}, {"scores", token_scores(s, deembed(c.f_enc(feature), s.params.W_E, k))}};
}

json get_examples(const Session& s, std::size_t layer, std::size_t feature, const std::map<std::string, std::string>& q) {
    const Coder& c = coder_at(s, layer);
    check_feature(c, feature);
    const std::size_t k = query_index(q, "k", 10);
    if (k == 0) bad_request("k must be at least 1");
    const bool redact = s.blind || query_bool(q, "redact", false);
    json list = json::array();
    for (const auto& ex : top_activating(s.params, c, feature, s.corpus, k, redact, &s.vocab)) {
        json e = {{"prompt", ex.prompt}, {"token", ex.token}, {"activation", ex.activation}, {"window_start", ex.window_start}};
        if (ex.window) e["text"] = *ex.window;
        list.push_back(std::move(e));
    }
    return {{"layer", layer}, {"feature", feature}, {"redacted", redact}, {"examples", std::move(list)}};
}

json post_trace(Session& s, const std::string& body) {
    const json j = parse_body(body);
    const std::size_t prompt_id = body_index(j, "prompt_id");
    const std::size_t layer = body_index(j, "layer");
    const std::size_t feature = body_index(j, "feature");
    const std::size_t token = body_index(j, "token");
    const std::size_t N = body_index(j, "N");
    const std::size_t L = body_index(j, "L");
    const bool rank_abs = body_bool(j, "rank_abs", false);
    const bool errors = body_bool(j, "errors", true);
    if (N == 0 || L == 0) bad_request("N and L must be at least 1");
    if (L > kTraceBudget || N > kTraceBudget / L) {
        throw HttpError{413, "budget_exceeded", "L*N must not exceed " + std::to_string(kTraceBudget)};
    }
    if (prompt_id >= s.corpus.prompts.size()) not_found("prompt " + std::to_string(prompt_id) + " does not exist");
    check_feature(coder_at(s, layer), feature);
    const std::size_t len = std::min(s.corpus.prompts[prompt_id].size(), s.params.config.context_len);
    if (token >= len) bad_request("token " + std::to_string(token) + " is past the end of the prompt");

    json payload = trace_payload(s, prompt_id, {layer, feature, token}, {L, N, rank_abs}, errors);
    std::lock_guard lock(s.trace_mutex);
    const std::string id = "t" + std::to_string(s.next_trace++);
    payload["trace_id"] = id;
    s.traces[id] = payload;
    return payload;
}

json get_trace(Session& s, const std::string& id) {
    std::lock_guard lock(s.trace_mutex);
    const auto it = s.traces.find(id);
    if (it == s.traces.end()) not_found("unknown trace id '" + id + "'");
    return it->second;
}

json post_ablate(const Session& s, const std::string& body) {
    const json j = parse_body(body);
    const std::size_t layer = body_index(j, "layer");
    const std::size_t k = body_index(j, "k");
    if (!j.contains("unit") || !j.at("unit").is_string()) bad_request("field 'unit' must be a string");
    AblationUnit unit;
    try {
        unit = ablation_unit_from_string(j.at("unit").get<std::string>());
    } catch (const UsageError& e) {
        bad_request(e.what());
    }
    if (layer >= s.params.config.n_layers) not_found("layer " + std::to_string(layer) + " does not exist");
    const Coder* coder = nullptr;
    if (unit == AblationUnit::transcoder_features) coder = &coder_at(s, layer);
    const YearTask task = YearTask::standard(s.vocab);
    const AblationCurve curve = topk_ablation_curve(s.params, task, unit, layer, coder, {k});
    return {{"layer", layer},
            {"unit", to_string(unit)},
            {"k", curve.ks.front()},
            {"prob_diff", curve.prob_diff.front()},
            {"original", curve.original},
            {"full_reference", curve.full_reference},
            {"zero_floor", curve.zero_floor}};
}

json get_invariant_connections(const Session& s, const std::map<std::string, std::string>& q) {
    const std::size_t upper_layer = query_index(q, "upper_layer", std::nullopt);
    const std::size_t upper_idx = query_index(q, "upper_idx", std::nullopt);
    const auto via = param(q, "via_head");
    if (!via) bad_request("missing query parameter 'via_head'");
    // "h" (a head of the upper layer) or "layer.h"
    std::size_t head_layer = upper_layer, head = 0;
    if (const auto dot = via->find('.'); dot != std::string::npos) {
        head_layer = parse_index(via->substr(0, dot), "via_head layer");
        head = parse_index(via->substr(dot + 1), "via_head head");
    } else {
        head = parse_index(*via, "via_head");
    }
    const std::size_t lower_layer = query_index(q, "lower_layer", 0);
    const std::size_t top_m = query_index(q, "top_m", 10);
    const std::size_t k = query_index(q, "k", 10);
    if (top_m == 0) bad_request("top_m must be at least 1");
    const Coder& upper = coder_at(s, upper_layer);
    const Coder& lower = coder_at(s, lower_layer);
    check_feature(upper, upper_idx);
    if (head_layer >= s.params.config.n_layers || head >= s.params.config.n_heads) not_found("head does not exist");
    if (!(lower_layer < head_layer && head_layer <= upper_layer)) {
        bad_request("need lower_layer < head layer <= upper_layer");
    }

    const auto conns = ov_connections(s.params, upper, upper_idx, head_layer, head, lower);
    json list = json::array();
    for (std::size_t m = 0; m < std::min(top_m, conns.size()); ++m) {
        list.push_back({{"feature", conns[m].feature}, {"weight", conns[m].weight}});
    }
    const auto scores = weighted_deembedding_scores(s.params, upper, upper_idx, head_layer, head, lower, top_m);
    return {{"upper_layer", upper_layer},
            {"upper_idx", upper_idx},
            {"head_layer", head_layer},
            {"head", head},
            {"lower_layer", lower_layer},
            {"connections", std::move(list)},
            {"weighted_deembedding", token_scores(s, top_scores(scores, k))}};
}

std::vector<std::string> split_path(const std::string& path) {
    std::vector<std::string> parts;
    std::size_t i = 0;
    while (i < path.size()) {
        if (path[i] == '/') {
            ++i;
            continue;
        }
        const std::size_t j = path.find('/', i);
        parts.push_back(path.substr(i, j == std::string::npos ? std::string::npos : j - i));
        i = j == std::string::npos ? path.size() : j;
    }
    return parts;
}

json route(Session& s, const std::string& method, const std::string& path, const std::map<std::string, std::string>& q,
           const std::string& body) {
    const auto parts = split_path(path);
    const bool get = method == "GET", post = method == "POST";
    if (get && parts.size() == 1 && parts[0] == "health") return {{"status", "ok"}};
    if (get && parts.size() == 1 && parts[0] == "prompts") return get_prompts(s);
    if (get && parts.size() == 4 && parts[0] == "features") {
        const std::size_t layer = parse_index(parts[1], "layer"), feature = parse_index(parts[2], "feature");
        if (parts[3] == "deembed") return get_deembed(s, layer, feature, q);
        if (parts[3] == "examples") return get_examples(s, layer, feature, q);
    }
    if (get && parts.size() == 3 && parts[0] == "examples") {
        return get_examples(s, parse_index(parts[1], "layer"), parse_index(parts[2], "feature"), q);
    }
    if (post && parts.size() == 1 && parts[0] == "trace") return post_trace(s, body);
    if (get && parts.size() == 2 && parts[0] == "trace") return get_trace(s, parts[1]);
    if (post && parts.size() == 1 && parts[0] == "ablate") return post_ablate(s, body);
    if (get && parts.size() == 1 && parts[0] == "invariant_connections") return get_invariant_connections(s, q);
    not_found("no endpoint " + method + " " + path);
}

json error_body(const std::string& code, const std::string& message) {
    return {{"error", {{"code", code}, {"message", message}}}};
}

} // namespace

nlohmann::json trace_payload(const Session& session, std::size_t prompt_id, const FeatureHandle& root,
                             const GreedyOptions& options, bool with_errors) {
    const auto& prompt = session.corpus.prompts.at(prompt_id);
    const std::vector<int> tokens(prompt.begin(),
                                  prompt.begin() + static_cast<std::ptrdiff_t>(std::min(prompt.size(), session.params.config.context_len)));
    const ActivationCache cache = forward_with_cache(session.params, tokens);
    std::map<std::size_t, const Coder*> coders;
    for (const auto& [layer, c] : session.coders) coders[layer] = &c;
    const SearchContext ctx(session.params, cache, coders);
    CircuitGraph graph = paths_to_graph(greedy_paths(ctx, root, options));
    if (with_errors) add_error_nodes(graph, ctx);
    return {{"prompt_id", prompt_id},
            {"root_active", ctx.z[root.layer][root.token][root.feature] > 0.0f},
            {"N", options.beam},
            {"L", options.depth},
            {"graph", graph_to_json(graph)}};
}

ApiResponse handle_request(Session& session, const std::string& method, const std::string& path,
                           const std::map<std::string, std::string>& query, const std::string& body) {
    try {
        return {200, route(session, method, path, query, body)};
    } catch (const HttpError& e) {
        return {e.status, error_body(e.code, e.message)};
    } catch (const InputError& e) {
        return {400, error_body("bad_request", e.what())};
    } catch (const UsageError& e) {
        return {400, error_body("bad_request", e.what())};
    } catch (const std::exception& e) {
        return {500, error_body("internal", e.what())};
    }
}

void serve(Session& session, const std::string& host, int port) {
    httplib::Server server;
    auto handler = [&session](const httplib::Request& req, httplib::Response& res) {
        std::map<std::string, std::string> query;
        for (const auto& [k, v] : req.params) query.emplace(k, v);
        const ApiResponse r = handle_request(session, req.method, req.path, query, req.body);
        res.status = r.status;
        res.set_content(r.body.dump(), "application/json");
    };
    server.Get(".*", handler);
    server.Post(".*", handler);
    if (!server.bind_to_port(host, port)) throw Error("serve: cannot bind " + host + ":" + std::to_string(port));
    server.listen_after_bind();
}

} // namespace tc
