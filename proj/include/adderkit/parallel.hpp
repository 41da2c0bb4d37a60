#pragma once

#include <cstdint>
#include <functional>

namespace adderkit {

// Process-wide worker count for parallel_for. Clamped to >= 1. The initial
// value honours the ADDERKIT_THREADS environment variable, else 1.
void set_num_threads(int n);
int num_threads();

// Runs fn(i) for every i in [begin, end), split into contiguous chunks across
// the configured workers. Each index is executed exactly once regardless of
// the worker count, so any op whose iterations write disjoint outputs is
// bitwise deterministic under every thread setting.
void parallel_for(std::int64_t begin, std::int64_t end,
                  const std::function<void(std::int64_t)>& fn);

}  // namespace adderkit
