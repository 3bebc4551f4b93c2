#pragma once

#include <cstddef>
#include <functional>

namespace evcseg {

/// Worker count: EVCSEG_THREADS when set (>= 1), else hardware concurrency.
unsigned worker_count();

/// Runs body(i) for i in [0, n). Each index is handled by exactly one
/// worker, so bodies that write disjoint outputs give schedule-independent
/// results.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

}  // namespace evcseg
