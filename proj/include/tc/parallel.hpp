#pragma once

#include <cstddef>
#include <functional>

namespace tc {

// Worker count: TC_THREADS if set (>=1), otherwise hardware concurrency.
std::size_t thread_count();

// Runs fn(i) for i in [0, n) over a static contiguous partition. Callers
// write results into per-index slots so output never depends on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

} // namespace tc
