#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace saor {

/// Number of worker lanes: hardware concurrency, capped by SAOR_THREADS.
inline std::size_t worker_count() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("SAOR_THREADS")) {
    try {
      const long cap = std::stol(env);
      if (cap >= 1) n = std::min<std::size_t>(n, static_cast<std::size_t>(cap));
    } catch (...) {
    }
  }
  return n;
}

/// Runs fn(i) for i in [0, count). Work items must write disjoint outputs;
/// results are then independent of the lane count.
template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn) {
  const std::size_t lanes = std::min(worker_count(), count);
  if (lanes <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(lanes);
  const std::size_t chunk = (count + lanes - 1) / lanes;
  for (std::size_t lane = 0; lane < lanes; ++lane) {
    const std::size_t begin = lane * chunk;
    const std::size_t end = std::min(count, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([begin, end, &fn] {
      for (std::size_t i = begin; i < end; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace saor
