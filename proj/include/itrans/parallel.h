#pragma once

#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>

namespace itrans {

// Worker count: ITRANS_THREADS if set, otherwise the OpenMP default.
int thread_count();

// Runs body(i) for i in [0, n). Work items must write to disjoint outputs;
// reductions are done by the caller in index order so results never depend
// on the number of threads. The first exception thrown is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

} // namespace itrans
