#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace sacnet::detail {

inline int64_t worker_count() {
  static const int64_t n = [] {
    if (const char* env = std::getenv("SACNET_THREADS")) {
      const long v = std::atol(env);
      if (v >= 1) return static_cast<int64_t>(v);
    }
    const unsigned hc = std::thread::hardware_concurrency();
    return static_cast<int64_t>(hc ? hc : 1);
  }();
  return n;
}

// Contiguous block partition over [0, n). Every element is computed entirely
// by one worker with the same inner order as the serial loop, so values do
// not depend on the worker count. total_work gates the fan-out: small jobs
// run inline rather than paying thread startup.
inline void parallel_for(int64_t n, int64_t total_work,
                         const std::function<void(int64_t, int64_t)>& range_fn) {
  constexpr int64_t kMinWork = int64_t{1} << 18;
  const int64_t workers = total_work < kMinWork ? 1 : std::min(worker_count(), n);
  if (workers <= 1) {
    if (n > 0) range_fn(0, n);
    return;
  }
  const int64_t chunk = (n + workers - 1) / workers;
  std::vector<std::thread> threads;
  for (int64_t w = 0; w < workers; ++w) {
    const int64_t lo = w * chunk, hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    threads.emplace_back([&range_fn, lo, hi]() { range_fn(lo, hi); });
  }
  for (auto& t : threads) t.join();
}

}  // namespace sacnet::detail
