#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <string>

#include "json.hpp"
#include "tc/circuits.hpp"
#include "tc/coder.hpp"
#include "tc/corpus.hpp"
#include "tc/model.hpp"

namespace tc {

// Everything the HTTP endpoints read. Model, coders and corpus are never
// mutated after construction; only the trace store changes.
struct Session {
    ModelParams params;
    std::map<std::size_t, Coder> coders; // by layer
    Vocab vocab;
    Corpus corpus;
    bool blind = false;

    std::mutex trace_mutex;
    std::map<std::string, nlohmann::json> traces;
    std::uint64_t next_trace = 0;
};

inline constexpr std::size_t kTraceBudget = 512; // max L * N per request

struct ApiResponse {
    int status = 200;
    nlohmann::json body;
};

/// Dispatches one request without any socket. `path` excludes the query
/// string; errors come back as {"error": {"code", "message"}} with 400, 404
/// or 413.
ApiResponse handle_request(Session& session, const std::string& method, const std::string& path,
                           const std::map<std::string, std::string>& query, const std::string& body);

// The payload POST /trace returns for the same inputs (without trace_id).
nlohmann::json trace_payload(const Session& session, std::size_t prompt_id, const FeatureHandle& root,
                             const GreedyOptions& options, bool with_errors);

/// Blocks serving HTTP on host:port until the process is stopped. Throws
/// Error if the address cannot be bound.
void serve(Session& session, const std::string& host, int port);

} // namespace tc
