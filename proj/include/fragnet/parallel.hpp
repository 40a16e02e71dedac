#pragma once

#include <algorithm>
#include <cstdint>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fragnet {

namespace detail {
inline int& thread_count_ref() {
  static int n = 1;
  return n;
}
}  // namespace detail

// Worker threads used by kernels that parallelize over independent work items.
// Results are bitwise identical for any thread count: work is partitioned into
// fixed chunks and every reduction runs in a fixed order.
inline void set_thread_count(int n) {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw <= 0) hw = 1;
  detail::thread_count_ref() = std::clamp(n, 1, std::max(hw, 64));
}

inline int thread_count() { return detail::thread_count_ref(); }

// Runs fn(i) for i in [0, n). Each index must touch disjoint outputs.
template <typename F>
void parallel_for(std::int64_t n, F&& fn) {
  const int threads = thread_count();
  if (threads <= 1 || n <= 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
#ifdef _OPENMP
#pragma omp parallel for schedule(static) num_threads(threads)
  for (std::int64_t i = 0; i < n; ++i) fn(i);
#else
  for (std::int64_t i = 0; i < n; ++i) fn(i);
#endif
}

}  // namespace fragnet
