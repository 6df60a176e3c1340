#include <algorithm>
#include <cmath>
#include <numeric>

#include "waunet/tensor/op_builder.hpp"
#include "waunet/tensor/parallel.hpp"

namespace waunet {

namespace {
thread_local ActivationPattern* t_pattern = nullptr;

void mix(std::uint64_t& h, std::uint64_t v) {
  h ^= v;
  h *= 0x100000001b3ull;
}
}  // namespace

ActivationPattern::Scope::Scope(ActivationPattern& pattern, Mode mode) : prev_(t_pattern) {
  pattern.mode_ = mode;
  switch (mode) {
    case Mode::fingerprint:
      pattern.fingerprint_ = 0xcbf29ce484222325ull;
      break;
    case Mode::record:
      pattern.relu_masks_.clear();
      pattern.pool_argmax_.clear();
      break;
    case Mode::replay:
      pattern.relu_cursor_ = 0;
      pattern.pool_cursor_ = 0;
      break;
    case Mode::off:
      break;
  }
  t_pattern = mode == Mode::off ? nullptr : &pattern;
}

ActivationPattern::Scope::~Scope() { t_pattern = prev_; }

ActivationPattern* ActivationPattern::current() { return t_pattern; }

void ActivationPattern::relu_pattern(std::vector<std::uint8_t>& mask) {
  switch (mode_) {
    case Mode::fingerprint:
      mix(fingerprint_, 0x52u);
      for (auto m : mask) mix(fingerprint_, m);
      break;
    case Mode::record:
      relu_masks_.push_back(mask);
      break;
    case Mode::replay:
      if (relu_cursor_ >= relu_masks_.size() || relu_masks_[relu_cursor_].size() != mask.size())
        throw UsageError("activation pattern replay does not match the recorded graph");
      mask = relu_masks_[relu_cursor_++];
      break;
    case Mode::off:
      break;
  }
}

void ActivationPattern::pool_pattern(std::vector<std::uint32_t>& argmax) {
  switch (mode_) {
    case Mode::fingerprint:
      mix(fingerprint_, 0x50u);
      for (auto a : argmax) mix(fingerprint_, a);
      break;
    case Mode::record:
      pool_argmax_.push_back(argmax);
      break;
    case Mode::replay:
      if (pool_cursor_ >= pool_argmax_.size() || pool_argmax_[pool_cursor_].size() != argmax.size())
        throw UsageError("activation pattern replay does not match the recorded graph");
      argmax = pool_argmax_[pool_cursor_++];
      break;
    case Mode::off:
      break;
  }
}

}  // namespace waunet

namespace waunet::ops {

using namespace internal;

Tensor relu(const Tensor& x) {
  const std::size_t n = x.numel();
  std::vector<std::uint8_t> mask(n);
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto in = x.data<T>();
    for (std::size_t i = 0; i < n; ++i) mask[i] = in[i] > T(0);
    if (auto* pattern = ActivationPattern::current()) pattern->relu_pattern(mask);
    auto o = out.data<T>();
    for (std::size_t i = 0; i < n; ++i) o[i] = mask[i] ? in[i] : T(0);
  });
  return finish(out, OpKind::relu, {x},
                [mask = std::move(mask)](const TensorImpl& o, std::span<const ImplPtr> in) {
                  dispatch(o.dtype, [&](auto tag) {
                    using T = decltype(tag);
                    const T* dy = detail::out_grad<T>(o);
                    if (T* dx = detail::grad_ptr<T>(*in[0]))
                      for (std::size_t i = 0; i < mask.size(); ++i)
                        if (mask[i]) dx[i] += dy[i];
                  });
                });
}

namespace {

// outer x axis x inner decomposition of a shape around `axis`.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

}  // namespace

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank())
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_str(x.shape()));
  const AxisSplit a = split_axis(x.shape(), axis);
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* in = x.data<T>().data();
    T* y = out.data<T>().data();
    for (std::size_t i = 0; i < x.numel(); ++i)
      if (!std::isfinite(in[i])) throw NumericError("softmax: non-finite input");
    for (std::size_t o = 0; o < a.outer; ++o)
      for (std::size_t q = 0; q < a.inner; ++q) {
        const std::size_t base = o * a.len * a.inner + q;
        T mx = in[base];
        for (std::size_t l = 1; l < a.len; ++l) mx = std::max(mx, in[base + l * a.inner]);
        T total = 0;
        for (std::size_t l = 0; l < a.len; ++l) {
          T e = std::exp(in[base + l * a.inner] - mx);
          y[base + l * a.inner] = e;
          total += e;
        }
        for (std::size_t l = 0; l < a.len; ++l) y[base + l * a.inner] /= total;
      }
  });
  return finish(out, OpKind::softmax, {x}, [a](const TensorImpl& o, std::span<const ImplPtr> in) {
    dispatch(o.dtype, [&](auto tag) {
      using T = decltype(tag);
      const T* dy = detail::out_grad<T>(o);
      const T* y = detail::data_ptr<T>(o);
      T* dx = detail::grad_ptr<T>(*in[0]);
      if (!dx) return;
      for (std::size_t oo = 0; oo < a.outer; ++oo)
        for (std::size_t q = 0; q < a.inner; ++q) {
          const std::size_t base = oo * a.len * a.inner + q;
          T dot = 0;
          for (std::size_t l = 0; l < a.len; ++l) dot += dy[base + l * a.inner] * y[base + l * a.inner];
          for (std::size_t l = 0; l < a.len; ++l) {
            const std::size_t i = base + l * a.inner;
            dx[i] += y[i] * (dy[i] - dot);
          }
        }
    });
  });
}

Tensor cross_entropy_loss(const Tensor& logits, const LabelMap& target) {
  require_rank("cross_entropy_loss", logits, 4);
  const std::size_t n = logits.dim(0), k = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  if (target.batch() != n || target.height() != h || target.width() != w)
    throw DimensionError("cross_entropy_loss: target " + std::to_string(target.batch()) + "x" +
                         std::to_string(target.height()) + "x" + std::to_string(target.width()) +
                         " does not match logits " + shape_str(logits.shape()));
  if (target.max_id() >= k)
    throw LabelError("cross_entropy_loss: class id " + std::to_string(target.max_id()) +
                     " outside [0, " + std::to_string(k) + ")");
  const std::size_t plane = h * w, pixels = n * plane;
  std::vector<std::uint8_t> labels(target.ids().begin(), target.ids().end());
  Tensor out = Tensor::zeros({1}, logits.dtype());
  dispatch(logits.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* z = logits.data<T>().data();
    double total = 0.0;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t p = 0; p < plane; ++p) {
        const T* zp = z + b * k * plane + p;
        T mx = zp[0];
        for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, zp[c * plane]);
        T s = 0;
        for (std::size_t c = 0; c < k; ++c) s += std::exp(zp[c * plane] - mx);
        const T log_z = mx + std::log(s);
        total += static_cast<double>(log_z - zp[labels[b * plane + p] * plane]);
      }
    out.data<T>()[0] = static_cast<T>(total / static_cast<double>(pixels));
  });
  if (!std::isfinite(out.at(0))) throw NumericError("cross_entropy_loss: non-finite loss");
  return finish(out, OpKind::cross_entropy, {logits},
                [=, labels = std::move(labels)](const TensorImpl& o, std::span<const ImplPtr> in) {
                  dispatch(o.dtype, [&](auto tag) {
                    using T = decltype(tag);
                    T* dz = detail::grad_ptr<T>(*in[0]);
                    if (!dz) return;
                    const T g = detail::out_grad<T>(o)[0] / static_cast<T>(pixels);
                    const T* z = detail::data_ptr<T>(*in[0]);
                    for (std::size_t b = 0; b < n; ++b)
                      for (std::size_t p = 0; p < plane; ++p) {
                        const T* zp = z + b * k * plane + p;
                        T* gp = dz + b * k * plane + p;
                        T mx = zp[0];
                        for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, zp[c * plane]);
                        T s = 0;
                        for (std::size_t c = 0; c < k; ++c) s += std::exp(zp[c * plane] - mx);
                        const std::size_t label = labels[b * plane + p];
                        for (std::size_t c = 0; c < k; ++c) {
                          T prob = std::exp(zp[c * plane] - mx) / s;
                          gp[c * plane] += g * (prob - (c == label ? T(1) : T(0)));
                        }
                      }
                  });
                });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_same_dtype("matmul", a, b);
  const bool batched = a.rank() == 3;
  if (!((a.rank() == 2 && b.rank() == 2) || (a.rank() == 3 && b.rank() == 3)))
    throw DimensionError("matmul: expected two rank-2 or two rank-3 operands, got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t bs = batched ? a.dim(0) : 1;
  const std::size_t m = a.dim(a.rank() - 2), kk = a.dim(a.rank() - 1);
  const std::size_t n = b.dim(b.rank() - 1);
  if (b.dim(b.rank() - 2) != kk || (batched && b.dim(0) != bs))
    throw DimensionError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  Shape os = batched ? Shape{bs, m, n} : Shape{m, n};
  Tensor out = Tensor::zeros(os, a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* x = a.data<T>().data();
    const T* y = b.data<T>().data();
    T* z = out.data<T>().data();
    parallel_for(bs * m, [&](std::size_t begin, std::size_t end) {
      for (std::size_t job = begin; job < end; ++job) {
        const std::size_t bb = job / m, i = job % m;
        const T* xr = x + (bb * m + i) * kk;
        T* zr = z + (bb * m + i) * n;
        for (std::size_t p = 0; p < kk; ++p) {
          const T xv = xr[p];
          const T* yr = y + (bb * kk + p) * n;
          for (std::size_t j = 0; j < n; ++j) zr[j] += xv * yr[j];
        }
      }
    });
  });
  kernel_counters().matmul_macs += bs * m * n * kk;
  return finish(out, OpKind::matmul, {a, b},
                [=](const TensorImpl& o, std::span<const ImplPtr> in) {
                  dispatch(o.dtype, [&](auto tag) {
                    using T = decltype(tag);
                    const T* dz = detail::out_grad<T>(o);
                    const T* x = detail::data_ptr<T>(*in[0]);
                    const T* y = detail::data_ptr<T>(*in[1]);
                    if (T* dx = detail::grad_ptr<T>(*in[0])) {
                      // dX = dZ Y^T
                      for (std::size_t bb = 0; bb < bs; ++bb)
                        for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t p = 0; p < kk; ++p) {
                            const T* dzr = dz + (bb * m + i) * n;
                            const T* yr = y + (bb * kk + p) * n;
                            T acc = 0;
                            for (std::size_t j = 0; j < n; ++j) acc += dzr[j] * yr[j];
                            dx[(bb * m + i) * kk + p] += acc;
                          }
                    }
                    if (T* dy = detail::grad_ptr<T>(*in[1])) {
                      // dY = X^T dZ
                      for (std::size_t bb = 0; bb < bs; ++bb)
                        for (std::size_t i = 0; i < m; ++i)
                          for (std::size_t p = 0; p < kk; ++p) {
                            const T xv = x[(bb * m + i) * kk + p];
                            const T* dzr = dz + (bb * m + i) * n;
                            T* dyr = dy + (bb * kk + p) * n;
                            for (std::size_t j = 0; j < n; ++j) dyr[j] += xv * dzr[j];
                          }
                    }
                  });
                });
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Tensor& first = parts.front();
  if (axis >= first.rank()) throw DimensionError("concat: axis out of range");
  Shape os = first.shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_same_dtype("concat", first, p);
    if (p.rank() != first.rank())
      throw DimensionError("concat: rank mismatch " + shape_str(p.shape()));
    for (std::size_t d = 0; d < p.rank(); ++d)
      if (d != axis && p.dim(d) != first.dim(d))
        throw DimensionError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                             shape_str(first.shape()) + " outside axis " + std::to_string(axis));
    total += p.dim(axis);
  }
  os[axis] = total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= os[d];
  for (std::size_t d = axis + 1; d < os.size(); ++d) inner *= os[d];
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.dim(axis) * inner);
  const std::size_t row = total * inner;

  Tensor out = Tensor::zeros(os, first.dtype());
  dispatch(first.dtype(), [&](auto tag) {
    using T = decltype(tag);
    T* y = out.data<T>().data();
    std::size_t offset = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const T* x = parts[i].data<T>().data();
      for (std::size_t o = 0; o < outer; ++o)
        std::copy(x + o * widths[i], x + (o + 1) * widths[i], y + o * row + offset);
      offset += widths[i];
    }
  });
  std::vector<Tensor> inputs(parts.begin(), parts.end());
  return finish(out, OpKind::concat, inputs,
                [=](const TensorImpl& o, std::span<const ImplPtr> in) {
                  dispatch(o.dtype, [&](auto tag) {
                    using T = decltype(tag);
                    const T* dy = detail::out_grad<T>(o);
                    std::size_t offset = 0;
                    for (std::size_t i = 0; i < in.size(); ++i) {
                      if (T* dx = detail::grad_ptr<T>(*in[i]))
                        for (std::size_t oo = 0; oo < outer; ++oo)
                          for (std::size_t j = 0; j < widths[i]; ++j)
                            dx[oo * widths[i] + j] += dy[oo * row + offset + j];
                      offset += widths[i];
                    }
                  });
                });
}

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  require_same_dtype(op, a, b);
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = a.data<T>(), y = b.data<T>();
    auto z = out.data<T>();
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] + y[i];
  });
  return finish(out, OpKind::add, {a, b}, [](const TensorImpl& o, std::span<const ImplPtr> in) {
    dispatch(o.dtype, [&](auto tag) {
      using T = decltype(tag);
      const T* dz = detail::out_grad<T>(o);
      const std::size_t n = numel(o.shape);
      for (int k = 0; k < 2; ++k)
        if (T* d = detail::grad_ptr<T>(*in[k]))
          for (std::size_t i = 0; i < n; ++i) d[i] += dz[i];
    });
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Tensor out = Tensor::zeros(a.shape(), a.dtype());
  dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto x = a.data<T>(), y = b.data<T>();
    auto z = out.data<T>();
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] * y[i];
  });
  return finish(out, OpKind::mul, {a, b}, [](const TensorImpl& o, std::span<const ImplPtr> in) {
    dispatch(o.dtype, [&](auto tag) {
      using T = decltype(tag);
      const T* dz = detail::out_grad<T>(o);
      const T* x = detail::data_ptr<T>(*in[0]);
      const T* y = detail::data_ptr<T>(*in[1]);
      const std::size_t n = numel(o.shape);
      if (T* dx = detail::grad_ptr<T>(*in[0]))
        for (std::size_t i = 0; i < n; ++i) dx[i] += dz[i] * y[i];
      if (T* dy = detail::grad_ptr<T>(*in[1]))
        for (std::size_t i = 0; i < n; ++i) dy[i] += dz[i] * x[i];
    });
  });
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out = Tensor::zeros(x.shape(), x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto in = x.data<T>();
    auto z = out.data<T>();
    const T f = static_cast<T>(factor);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = in[i] * f;
  });
  return finish(out, OpKind::scale, {x},
                [factor](const TensorImpl& o, std::span<const ImplPtr> in) {
                  dispatch(o.dtype, [&](auto tag) {
                    using T = decltype(tag);
                    const T* dz = detail::out_grad<T>(o);
                    const T f = static_cast<T>(factor);
                    if (T* dx = detail::grad_ptr<T>(*in[0]))
                      for (std::size_t i = 0; i < numel(o.shape); ++i) dx[i] += dz[i] * f;
                  });
                });
}

Tensor permute(const Tensor& x, std::span<const std::size_t> order) {
  const std::size_t r = x.rank();
  if (order.size() != r) throw DimensionError("permute: order length does not match rank");
  std::vector<bool> used(r, false);
  for (auto o : order) {
    if (o >= r || used[o]) throw DimensionError("permute: order is not a permutation");
    used[o] = true;
  }
  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = x.dim(order[i]);
  // Input stride for each output axis.
  std::vector<std::size_t> in_stride(r), stride_src(r);
  std::size_t s = 1;
  for (std::size_t d = r; d-- > 0;) {
    stride_src[d] = s;
    s *= x.dim(d);
  }
  for (std::size_t i = 0; i < r; ++i) in_stride[i] = stride_src[order[i]];
  // Flat output index -> flat input index.
  const std::size_t n = x.numel();
  std::vector<std::size_t> map(n);
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t src = 0;
    for (std::size_t i = 0; i < n; ++i) {
      map[i] = src;
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        src += in_stride[d];
        if (idx[d] < os[d]) break;
        src -= in_stride[d] * os[d];
        idx[d] = 0;
      }
    }
  }
  Tensor out = Tensor::zeros(os, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto in = x.data<T>();
    auto z = out.data<T>();
    for (std::size_t i = 0; i < n; ++i) z[i] = in[map[i]];
  });
  return finish(out, OpKind::permute, {x},
                [map = std::move(map)](const TensorImpl& o, std::span<const ImplPtr> in) {
                  dispatch(o.dtype, [&](auto tag) {
                    using T = decltype(tag);
                    const T* dz = detail::out_grad<T>(o);
                    if (T* dx = detail::grad_ptr<T>(*in[0]))
                      for (std::size_t i = 0; i < map.size(); ++i) dx[map[i]] += dz[i];
                  });
                });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (numel(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(shape));
  Tensor out = Tensor::zeros(shape, x.dtype());
  out.impl().data = x.impl().data;
  return finish(out, OpKind::reshape, {x}, [](const TensorImpl& o, std::span<const ImplPtr> in) {
    dispatch(o.dtype, [&](auto tag) {
      using T = decltype(tag);
      const T* dz = detail::out_grad<T>(o);
      if (T* dx = detail::grad_ptr<T>(*in[0]))
        for (std::size_t i = 0; i < numel(o.shape); ++i) dx[i] += dz[i];
    });
  });
}

Tensor sum(const Tensor& x) {
  Tensor out = Tensor::zeros({1}, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto in = x.data<T>();
    T acc = 0;
    for (auto v : in) acc += v;
    out.data<T>()[0] = acc;
  });
  return finish(out, OpKind::sum, {x}, [](const TensorImpl& o, std::span<const ImplPtr> in) {
    dispatch(o.dtype, [&](auto tag) {
      using T = decltype(tag);
      const T g = detail::out_grad<T>(o)[0];
      if (T* dx = detail::grad_ptr<T>(*in[0]))
        for (std::size_t i = 0; i < numel(in[0]->shape); ++i) dx[i] += g;
    });
  });
}

Tensor mean(const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  Tensor out = Tensor::zeros({1}, x.dtype());
  dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto in = x.data<T>();
    T acc = 0;
    for (auto v : in) acc += v;
    out.data<T>()[0] = acc / static_cast<T>(n);
  });
  return finish(out, OpKind::mean, {x}, [n](const TensorImpl& o, std::span<const ImplPtr> in) {
    dispatch(o.dtype, [&](auto tag) {
      using T = decltype(tag);
      const T g = detail::out_grad<T>(o)[0] / static_cast<T>(n);
      if (T* dx = detail::grad_ptr<T>(*in[0]))
        for (std::size_t i = 0; i < numel(in[0]->shape); ++i) dx[i] += g;
    });
  });
}

}  // namespace waunet::ops
