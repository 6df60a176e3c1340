#include "waunet/tensor/parallel.hpp"

#include <algorithm>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace waunet {

namespace {

std::size_t threads_from_env() {
  const char* env = std::getenv("WAUNET_THREADS");
  if (!env || !*env) return 1;
  try {
    long v = std::stol(env);
    return v >= 1 ? static_cast<std::size_t>(v) : 1;
  } catch (...) {
    return 1;
  }
}

std::atomic<std::size_t> g_threads{threads_from_env()};

}  // namespace

std::size_t kernel_threads() { return g_threads.load(); }

void set_kernel_threads(std::size_t n) { g_threads.store(std::max<std::size_t>(1, n)); }

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
  const std::size_t workers = std::min(kernel_threads(), n);
  if (workers <= 1) {
    if (n) fn(0, n);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    std::size_t b = w * chunk, e = std::min(n, b + chunk);
    if (b < e) pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(0, std::min(n, chunk));
}

void KernelCounters::reset() {
  matmul_macs = 0;
  conv_macs = 0;
  axial_score_macs = 0;
  axial_aggregate_macs = 0;
  axial_positional_macs = 0;
}

KernelCounters& kernel_counters() {
  static KernelCounters counters;
  return counters;
}

}  // namespace waunet
