#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "waunet/attention/axial_attention.hpp"
#include "waunet/network/waunet.hpp"
#include "waunet/tensor/tensor.hpp"

namespace waunet::diag {

struct LayerCheck {
  std::string name;  // primitive name, or "network"
  double max_rel_error = 0.0;
  double threshold = 0.0;
  std::size_t coords = 0;
  std::size_t kink_coords = 0;
  std::string worst_param;  // offending leaf of the worst coordinate
  bool passed() const { return max_rel_error < threshold; }
};

// One finite-difference check per primitive kind, on small random 64-bit
// inputs. Every kind in all_op_kinds() appears exactly once, in that order.
std::vector<LayerCheck> primitive_grad_checks(double eps, double threshold, std::uint64_t seed);

// Whole-network check on random images and labels. The zero-initialized
// output projections and head are randomized first so every parameter
// reaches the loss; `config` is forced to 64-bit.
LayerCheck network_grad_check(net::NetConfig config, std::size_t coords, double eps,
                              double threshold, std::uint64_t seed);

struct BenchRow {
  attn::AttentionMode mode;
  std::size_t size = 0;         // H = W
  std::size_t tokens = 0;       // H * W
  std::uint64_t flops = 0;      // count_attention_flops x batch
  std::uint64_t counted = 0;    // instrumented score + aggregate MACs
  double seconds = 0.0;         // best of the timed repeats
};

struct BenchOptions {
  std::vector<std::size_t> sizes{8, 16, 32, 64};
  std::size_t full_max_size = 32;
  std::size_t channels = 32;
  std::size_t heads = 4;
  std::size_t batch = 2;
  double min_seconds = 0.05;  // per timed repeat, looping the kernel if faster
  std::size_t repeats = 3;
  std::uint64_t seed = 0;
};

// Times the attention kernels alone (projections excluded) for one axial
// layer, both passes, and for dense attention over all tokens.
std::vector<BenchRow> run_attention_bench(const BenchOptions& options);

// Least-squares slope of log(seconds) against log(tokens) for one mode.
double fitted_slope(const std::vector<BenchRow>& rows, attn::AttentionMode mode);

std::string bench_csv(const std::vector<BenchRow>& rows);

}  // namespace waunet::diag
