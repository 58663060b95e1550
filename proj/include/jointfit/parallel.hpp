#pragma once

#include <cstddef>

#include <functional>

namespace jointfit {

// Worker-thread budget: JOINTFIT_THREADS when set (>= 1), otherwise the
// hardware concurrency.  Read once per process.
int thread_budget();

// Runs f(i) for i in [0, n) on up to thread_budget() threads in contiguous
// chunks.  Callers write results by index, so the outcome is independent
// of scheduling; the first exception thrown by any worker is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& f);

}  // namespace jointfit
