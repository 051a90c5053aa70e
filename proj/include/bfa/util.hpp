#pragma once

#include <cstdint>
#include <functional>
#include <string>

namespace bfa {

// Worker count used by the parallel kernels. Defaults to the hardware
// concurrency, capped by the BFA_THREADS environment variable.
int worker_count();

// Splits [0, n) into contiguous chunks and runs fn(begin, end) on each,
// possibly on multiple threads. Each index must be written by at most one
// chunk; results are bit-identical regardless of the worker count.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn);

}  // namespace bfa
