#pragma once

#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace gabic {

// Worker cap: GABIC_THREADS if set, else 1. Parallel sections split work into
// disjoint index ranges so results do not depend on the thread count.
inline int max_threads() {
  static int cached = [] {
    if (const char* env = std::getenv("GABIC_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    return 1;
  }();
  return cached;
}

template <typename Fn>
void parallel_for(long n, Fn&& fn) {
  int nt = max_threads();
  if (nt <= 1 || n <= 1) {
    for (long i = 0; i < n; ++i) fn(i);
    return;
  }
  if (nt > n) nt = static_cast<int>(n);
  std::vector<std::thread> pool;
  pool.reserve(nt);
  long chunk = (n + nt - 1) / nt;
  for (int t = 0; t < nt; ++t) {
    long lo = t * chunk;
    long hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn] {
      for (long i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace gabic
