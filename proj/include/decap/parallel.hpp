// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace decap {

/// Number of worker threads to use when the caller passes 0.
inline unsigned default_threads() {
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs fn(task) for task in [0, tasks) on up to `threads` threads. Tasks are
/// assigned in contiguous blocks; callers that need deterministic output write
/// into per-task slots and reduce afterwards.
template <typename Fn>
void parallel_for(std::size_t tasks, unsigned threads, Fn&& fn) {
  if (threads == 0) threads = default_threads();
  const std::size_t workers = std::min<std::size_t>(threads, tasks);
  if (workers <= 1) {
    for (std::size_t t = 0; t < tasks; ++t) fn(t);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = tasks * w / workers;
    const std::size_t end = tasks * (w + 1) / workers;
    pool.emplace_back([&fn, begin, end] {
      for (std::size_t t = begin; t < end; ++t) fn(t);
    });
  }
}

}  // namespace decap
