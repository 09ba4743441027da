#pragma once

#include <cstddef>
#include <functional>

namespace fang {

// Worker count: FANG_THREADS if set (>= 1), otherwise hardware concurrency.
std::size_t thread_count();

// Runs body(i) for i in [0, n). Work is split into contiguous chunks, one per
// worker; every index is handled by exactly one call, so any body that writes
// only to slot i produces results independent of the thread count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace fang
