#pragma once

#include <cstdint>
#include <functional>

namespace rl {

// Worker cap: RL_THREADS when set and positive, else hardware concurrency.
int worker_threads();

// Runs fn(i) for i in [0, count). Each index is handled by exactly one
// worker, so callers that write disjoint outputs stay deterministic
// regardless of the thread count.
void parallel_for(std::int64_t count, const std::function<void(std::int64_t)>& fn);

// Keeps large tensor buffers on the heap between iterations instead of
// returning them to the kernel after every op. Call once from main().
void tune_allocator();

}  // namespace rl
