#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace contactlab {

inline constexpr std::size_t kReplicaBlock = 1024;

/// Runs body(replica, acc) for replica in [0, replicas) on `workers` threads.
/// Replicas are grouped in fixed-size blocks, each with its own copy of
/// `prototype`; blocks are merged in index order, so the result does not
/// depend on scheduling or on the number of workers.
template <class Acc, class Body>
Acc run_replicas(std::size_t replicas, unsigned workers, const Acc& prototype, Body&& body) {
  const std::size_t blocks = (replicas + kReplicaBlock - 1) / kReplicaBlock;
  std::vector<Acc> partial(blocks, prototype);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;

  auto worker = [&] {
    try {
      for (std::size_t b = next++; b < blocks; b = next++) {
        const std::size_t begin = b * kReplicaBlock;
        const std::size_t end = std::min(replicas, begin + kReplicaBlock);
        for (std::size_t r = begin; r < end; ++r) body(r, partial[b]);
      }
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
      next = blocks;
    }
  };

  workers = std::max(1u, workers);
  if (workers == 1 || blocks <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < std::min<std::size_t>(workers, blocks); ++w) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);

  Acc total = prototype;
  for (auto& p : partial) total.merge(p);
  return total;
}

}  // namespace contactlab
