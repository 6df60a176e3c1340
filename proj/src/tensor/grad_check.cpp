#include "waunet/tensor/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "waunet/tensor/ops.hpp"
#include "waunet/tensor/rng.hpp"

namespace waunet {

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

namespace {

struct Coord {
  std::size_t param;
  std::size_t index;
  bool operator<(const Coord& o) const {
    return param != o.param ? param < o.param : index < o.index;
  }
};

std::vector<Coord> sample_coords(std::span<Tensor> params, const GradCheckOptions& opt) {
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& p : params) {
    offsets.push_back(total);
    total += p.numel();
  }
  std::vector<Coord> out;
  if (opt.max_coords == 0 || opt.max_coords >= total) {
    for (std::size_t i = 0; i < params.size(); ++i)
      for (std::size_t j = 0; j < params[i].numel(); ++j) out.push_back({i, j});
    return out;
  }
  Rng rng(mix_seed(opt.seed, 0x6763));
  std::set<Coord> chosen;
  for (std::size_t i = 0; i < params.size(); ++i) chosen.insert({i, rng.below(params[i].numel())});
  while (chosen.size() < std::max(opt.max_coords, params.size())) {
    std::size_t flat = rng.below(total);
    std::size_t p = static_cast<std::size_t>(
        std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin() - 1);
    chosen.insert({p, flat - offsets[p]});
  }
  return {chosen.begin(), chosen.end()};
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor()>& loss, std::span<Tensor> params,
                           const GradCheckOptions& options) {
  for (const auto& p : params) {
    if (p.dtype() != DType::f64) throw UsageError("grad_check: parameters must be 64-bit");
    if (!p.is_leaf()) throw UsageError("grad_check: parameters must be leaves");
  }
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tensor l = loss();
    l.backward();
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) analytic.push_back(p.grad().to_vector());

  ActivationPattern base_pattern;
  std::uint64_t base_fp;
  {
    NoGradGuard ng;
    {
      ActivationPattern::Scope s(base_pattern, ActivationPattern::Mode::record);
      loss();
    }
    ActivationPattern probe;
    ActivationPattern::Scope s(probe, ActivationPattern::Mode::fingerprint);
    loss();
    base_fp = probe.fingerprint();
  }

  GradCheckResult res;
  res.per_param_max.assign(params.size(), 0.0);
  for (const Coord& c : sample_coords(params, options)) {
    Tensor& p = params[c.param];
    auto data = p.data<double>();
    const double orig = data[c.index];
    auto eval = [&](double x, std::uint64_t* fp) {
      data[c.index] = x;
      NoGradGuard ng;
      if (fp) {
        ActivationPattern probe;
        ActivationPattern::Scope s(probe, ActivationPattern::Mode::fingerprint);
        double v = loss().item();
        *fp = probe.fingerprint();
        return v;
      }
      ActivationPattern::Scope s(base_pattern, ActivationPattern::Mode::replay);
      return loss().item();
    };
    std::uint64_t fp_plus = 0, fp_minus = 0;
    double f_plus = eval(orig + options.eps, &fp_plus);
    double f_minus = eval(orig - options.eps, &fp_minus);
    if (fp_plus != base_fp || fp_minus != base_fp) {
      ++res.kink_coords;
      f_plus = eval(orig + options.eps, nullptr);
      f_minus = eval(orig - options.eps, nullptr);
    }
    data[c.index] = orig;
    const double numeric = (f_plus - f_minus) / (2.0 * options.eps);
    const double a = analytic[c.param][c.index];
    const double err = relative_error(a, numeric);
    ++res.coords_checked;
    res.per_param_max[c.param] = std::max(res.per_param_max[c.param], err);
    if (err > res.max_rel_error || res.coords_checked == 1) {
      res.max_rel_error = std::max(res.max_rel_error, err);
      res.worst_param = c.param;
      res.worst_index = c.index;
      res.worst_analytic = a;
      res.worst_numeric = numeric;
    }
  }
  return res;
}

}  // namespace waunet
