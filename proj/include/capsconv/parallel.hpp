#pragma once

// Owner-partitioned data parallelism. Every work item belongs to exactly one
// worker, so results never depend on the worker count.

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace capsconv {

enum class AccumulationMode {
  reference,  // canonical summation order, bitwise comparable across engines
  optimized,  // zero-copy views and register-blocked kernels
};

inline const char* to_string(AccumulationMode mode) {
  return mode == AccumulationMode::reference ? "reference" : "optimized";
}

struct ExecPolicy {
  std::size_t workers = 1;
  AccumulationMode mode = AccumulationMode::reference;
};

/// Splits [0, count) into at most `workers` contiguous ranges and runs
/// body(begin, end) once per range. Range w runs on the calling thread when w == 0.
template <typename Body>
void parallel_for(std::size_t count, std::size_t workers, Body&& body) {
  if (count == 0) return;
  workers = std::clamp<std::size_t>(workers, 1, count);
  if (workers == 1) {
    body(std::size_t{0}, count);
    return;
  }
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto run = [&](std::size_t w) {
    const std::size_t begin = count * w / workers;
    const std::size_t end = count * (w + 1) / workers;
    try {
      body(begin, end);
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  };
  {
    std::vector<std::jthread> threads;
    threads.reserve(workers - 1);
    for (std::size_t w = 1; w < workers; ++w) threads.emplace_back(run, w);
    run(0);
  }
  if (failure) std::rethrow_exception(failure);
}

}  // namespace capsconv
