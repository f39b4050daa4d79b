#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace lesionseg {

namespace detail {
inline std::atomic<int>& max_threads_slot() {
  static std::atomic<int> n{static_cast<int>(std::thread::hardware_concurrency())};
  return n;
}
}  // namespace detail

inline int max_threads() {
  int n = detail::max_threads_slot().load();
  return n < 1 ? 1 : n;
}

inline void set_max_threads(int n) { detail::max_threads_slot().store(n < 1 ? 1 : n); }

/// Runs fn(i) for i in [0, n). Work is split into contiguous chunks; every
/// item writes only its own outputs, so results do not depend on the thread
/// count.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t threads =
      std::min<std::size_t>(static_cast<std::size_t>(max_threads()), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads);
  const std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t begin = t * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] {
      for (std::size_t i = begin; i < end; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace lesionseg
