#pragma once

#include <cstdint>
#include <functional>

namespace mkis {

// Global worker count for parallel_for. 1 = run everything inline.
int thread_count();
void set_thread_count(int n);

// Splits [0, n) into contiguous chunks and runs fn(begin, end) on each.
// Chunks never share output elements, so results are identical for any
// thread count; reductions inside a chunk keep their written loop order.
// Work below `grain` runs inline regardless of the thread setting.
void parallel_for(int64_t n, int64_t grain,
                  const std::function<void(int64_t, int64_t)>& fn);

}  // namespace mkis
