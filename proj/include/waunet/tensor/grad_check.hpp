#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "waunet/tensor/tensor.hpp"

namespace waunet {

struct GradCheckOptions {
  double eps = 1e-4;
  // 0 checks every coordinate. Otherwise at least one coordinate per
  // parameter is sampled, and the rest uniformly over all coordinates.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  // Coordinates whose +/-eps perturbation flipped a relu or max-pool choice;
  // these are differenced with the base point's pattern held fixed.
  std::size_t kink_coords = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::vector<double> per_param_max;  // indexed like `params`
};

// Compares backward() against central differences. `loss` must rebuild the
// scalar loss from the current values of `params` deterministically; all
// parameters must be 64-bit leaves.
GradCheckResult grad_check(const std::function<Tensor()>& loss, std::span<Tensor> params,
                           const GradCheckOptions& options = {});

double relative_error(double analytic, double numeric);

}  // namespace waunet
