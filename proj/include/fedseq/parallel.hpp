#pragma once

#include <cstddef>
#include <functional>

namespace fedseq {

/// Worker count: an explicit override if set, else FEDSEQ_THREADS, else the
/// hardware concurrency.
std::size_t worker_threads();
/// 0 clears the override.
void set_worker_threads(std::size_t n);

/// Runs fn(i) for i in [0, n). Each index must write only to its own slot;
/// the first exception thrown by any worker is rethrown.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace fedseq
