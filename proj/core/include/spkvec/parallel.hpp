#pragma once

#include <cstddef>
#include <functional>

namespace spkvec {

// Number of worker threads used by parallel_for. Defaults to the hardware
// concurrency; override with the SPKVEC_THREADS environment variable.
std::size_t thread_count();

// Runs fn(begin, end) over a static partition of [0, n). Chunk boundaries
// depend only on n and the thread count, and every chunk writes disjoint
// output, so results are bit-identical run to run. Falls back to a single
// inline call when n is small or one thread is configured.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace spkvec
