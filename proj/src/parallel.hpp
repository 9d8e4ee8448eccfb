#pragma once

#include <functional>

namespace invflow {

// Worker count: INVFLOW_THREADS if set (clamped to [1,64]), else hardware.
int ThreadCount();

// Runs fn(i) for i in [begin, end) on up to ThreadCount() threads with a
// static block partition. Callers guarantee disjoint writes, so results are
// bit-identical for any thread count.
void ParallelFor(int begin, int end, const std::function<void(int)>& fn);

}  // namespace invflow
