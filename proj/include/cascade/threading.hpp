#pragma once

#include <cstddef>
#include <functional>

namespace cascade {

// Process-wide worker count. 0 is never stored; set_workers clamps to >= 1.
void set_workers(std::size_t n);
std::size_t workers();

// Runs fn(i) for i in [0, count) split into `workers()` contiguous chunks.
// Each index is handled by exactly one thread and chunk boundaries depend
// only on (count, workers), so any value computed purely from its own index
// is bit-identical across runs and across thread counts. Reductions must NOT
// be done inside fn; accumulate per-index results afterwards in index order.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& fn);

// Chunked variant: fn(begin, end) per contiguous range, one range per worker.
void parallel_for_ranges(std::size_t count,
                         const std::function<void(std::size_t, std::size_t)>& fn);

}  // namespace cascade
