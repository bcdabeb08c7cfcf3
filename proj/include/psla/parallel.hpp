#pragma once

#include <cstddef>
#include <functional>

namespace psla {

// Worker cap: min(hardware threads, PSLA_THREADS when set and positive).
std::size_t worker_count();

// Runs body(i) for i in [begin, end), splitting into contiguous chunks across
// worker_count() threads once the range holds at least min_parallel items.
// Each index is processed exactly once; results written per index are
// independent of the thread count.
void parallel_for(std::size_t begin, std::size_t end, const std::function<void(std::size_t)>& body,
                  std::size_t min_parallel = 64);

}  // namespace psla
