#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace flexspike {

// Process-wide worker budget. 1 (the default) means fully serial execution;
// results are identical for any fixed worker count because parallel regions
// write disjoint ranges and reductions merge per-worker buffers in index
// order.
inline std::atomic<int>& thread_count() {
  static std::atomic<int> n{1};
  return n;
}

inline void set_thread_count(int n) { thread_count() = n < 1 ? 1 : n; }

// Runs fn(begin, end) over a fixed block partition of [0, n).
inline void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
  int workers = thread_count().load();
  if (workers <= 1 || n < 2) {
    fn(0, n);
    return;
  }
  std::size_t w = static_cast<std::size_t>(workers);
  if (w > n) w = n;
  std::size_t chunk = (n + w - 1) / w;
  std::vector<std::thread> pool;
  pool.reserve(w);
  for (std::size_t t = 0; t < w; ++t) {
    std::size_t b = t * chunk;
    std::size_t e = std::min(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  for (auto& th : pool) th.join();
}

}  // namespace flexspike
