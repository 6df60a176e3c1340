#pragma once

#include <cmath>
#include <vector>

#include "waunet/tensor/rng.hpp"
#include "waunet/tensor/tensor.hpp"

namespace waunet::test {

inline Tensor random_tensor(const Shape& shape, Rng& rng, DType dtype = DType::f64,
                            double lo = -1.0, double hi = 1.0, bool requires_grad = false) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_values(shape, v, dtype, requires_grad);
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return a.size() == b.size() ? m : INFINITY;
}

// Direct nested-loop cross-correlation, zero padded.
inline std::vector<double> conv2d_oracle(const Tensor& x, const Tensor& w, std::size_t stride,
                                         std::size_t pad) {
  const long n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const long co = w.dim(0), k = w.dim(2);
  const long ho = (h + 2 * static_cast<long>(pad) - k) / static_cast<long>(stride) + 1;
  const long wo = (wd + 2 * static_cast<long>(pad) - k) / static_cast<long>(stride) + 1;
  auto xv = x.to_vector(), wv = w.to_vector();
  std::vector<double> out(n * co * ho * wo, 0.0);
  for (long b = 0; b < n; ++b)
    for (long o = 0; o < co; ++o)
      for (long r = 0; r < ho; ++r)
        for (long c = 0; c < wo; ++c)
          for (long i = 0; i < ci; ++i)
            for (long kr = 0; kr < k; ++kr)
              for (long kc = 0; kc < k; ++kc) {
                long ir = r * static_cast<long>(stride) + kr - static_cast<long>(pad);
                long ic = c * static_cast<long>(stride) + kc - static_cast<long>(pad);
                if (ir < 0 || ir >= h || ic < 0 || ic >= wd) continue;
                out[((b * co + o) * ho + r) * wo + c] +=
                    xv[((b * ci + i) * h + ir) * wd + ic] * wv[((o * ci + i) * k + kr) * k + kc];
              }
  return out;
}

// Scatter-add definition of the 2x2 stride-2 transposed convolution.
inline std::vector<double> deconv2d_oracle(const Tensor& x, const Tensor& w) {
  const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3), co = w.dim(1);
  auto xv = x.to_vector(), wv = w.to_vector();
  std::vector<double> out(n * co * 4 * h * wd, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < ci; ++i)
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < wd; ++c)
          for (std::size_t o = 0; o < co; ++o)
            for (std::size_t a = 0; a < 2; ++a)
              for (std::size_t e = 0; e < 2; ++e)
                out[((b * co + o) * 2 * h + 2 * r + a) * 2 * wd + 2 * c + e] +=
                    xv[((b * ci + i) * h + r) * wd + c] * wv[((i * co + o) * 2 + a) * 2 + e];
  return out;
}

}  // namespace waunet::test
