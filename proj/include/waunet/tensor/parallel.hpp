#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>

namespace waunet {

// Upper bound on threads used inside a single kernel. Initialized from the
// WAUNET_THREADS environment variable, default 1.
std::size_t kernel_threads();
void set_kernel_threads(std::size_t n);

// Splits [0, n) into contiguous chunks. Kernels only hand out work whose
// results do not depend on the chunking.
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn);

// Multiply-accumulate counters incremented by the forward kernels.
struct KernelCounters {
  std::atomic<std::uint64_t> matmul_macs{0};
  std::atomic<std::uint64_t> conv_macs{0};
  std::atomic<std::uint64_t> axial_score_macs{0};
  std::atomic<std::uint64_t> axial_aggregate_macs{0};
  std::atomic<std::uint64_t> axial_positional_macs{0};

  void reset();
};

KernelCounters& kernel_counters();

}  // namespace waunet
