#pragma once

#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

#include "bilmpc/types.hpp"

namespace bilmpc {

/// Worker count: explicit argument wins, then BILMPC_WORKERS, then 1.
inline int default_workers() {
  if (const char* env = std::getenv("BILMPC_WORKERS")) {
    const int v = std::atoi(env);
    if (v >= 1) return v;
  }
  return 1;
}

/// Runs fn(i) for i in [0, n).  Each index writes only its own outputs, so the
/// result cannot depend on the dispatch order; workers <= 1 runs inline.
template <typename Fn>
void parallel_for(Index n, int workers, Fn&& fn) {
  if (workers <= 1 || n <= 1) {
    for (Index i = 0; i < n; ++i) fn(i);
    return;
  }
  const int used = static_cast<int>(std::min<Index>(workers, n));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(used));
  for (int t = 0; t < used; ++t) {
    pool.emplace_back([&, t]() {
      for (Index i = t; i < n; i += used) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace bilmpc
