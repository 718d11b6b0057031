#pragma once

#include <cstddef>
#include <functional>

namespace qdetect {

// Worker count from QDETECT_THREADS. 0 or unset means single-threaded.
unsigned worker_threads();

// Runs body(i) for i in [0, n). Each index is handled exactly once; callers
// must make body(i) depend only on i so results are independent of the split.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

} // namespace qdetect
