#include <algorithm>
#include <limits>

#include "waunet/tensor/op_builder.hpp"
#include "waunet/tensor/parallel.hpp"

namespace waunet::ops {

using namespace internal;

namespace {

struct ConvGeom {
  std::size_t n, cin, h, w, cout, k, stride, pad, ho, wo;
};

// Valid output-column range [lo, hi) for kernel column kw.
inline void col_range(const ConvGeom& g, std::size_t kw, std::size_t& lo, std::size_t& hi) {
  // iw = ow*stride + kw - pad must lie in [0, w)
  const long p = static_cast<long>(g.pad), s = static_cast<long>(g.stride);
  const long kwl = static_cast<long>(kw), wl = static_cast<long>(g.w);
  long l = p - kwl > 0 ? (p - kwl + s - 1) / s : 0;
  long h = (wl - 1 + p - kwl) >= 0 ? (wl - 1 + p - kwl) / s + 1 : 0;
  h = std::min<long>(h, static_cast<long>(g.wo));
  lo = static_cast<std::size_t>(std::min(l, h));
  hi = static_cast<std::size_t>(h);
}

template <class T>
void conv_forward(const ConvGeom& g, const T* x, const T* wt, const T* b, T* y) {
  parallel_for(g.n * g.cout, [&](std::size_t begin, std::size_t end) {
    for (std::size_t job = begin; job < end; ++job) {
      const std::size_t n = job / g.cout, oc = job % g.cout;
      T* out = y + job * g.ho * g.wo;
      std::fill(out, out + g.ho * g.wo, b ? b[oc] : T(0));
      for (std::size_t ic = 0; ic < g.cin; ++ic) {
        const T* in = x + (n * g.cin + ic) * g.h * g.w;
        for (std::size_t kh = 0; kh < g.k; ++kh) {
          for (std::size_t kw = 0; kw < g.k; ++kw) {
            const T wv = wt[((oc * g.cin + ic) * g.k + kh) * g.k + kw];
            std::size_t lo, hi;
            col_range(g, kw, lo, hi);
            for (std::size_t oh = 0; oh < g.ho; ++oh) {
              const long ih = static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.pad);
              if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
              const T* row = in + static_cast<std::size_t>(ih) * g.w;
              T* orow = out + oh * g.wo;
              for (std::size_t ow = lo; ow < hi; ++ow)
                orow[ow] += wv * row[ow * g.stride + kw - g.pad];
            }
          }
        }
      }
    }
  });
  kernel_counters().conv_macs += g.n * g.cout * g.ho * g.wo * g.cin * g.k * g.k;
}

template <class T>
void conv_backward_input(const ConvGeom& g, const T* dy, const T* wt, T* dx) {
  parallel_for(g.n * g.cin, [&](std::size_t begin, std::size_t end) {
    for (std::size_t job = begin; job < end; ++job) {
      const std::size_t n = job / g.cin, ic = job % g.cin;
      T* gin = dx + job * g.h * g.w;
      for (std::size_t oc = 0; oc < g.cout; ++oc) {
        const T* gout = dy + (n * g.cout + oc) * g.ho * g.wo;
        for (std::size_t kh = 0; kh < g.k; ++kh) {
          for (std::size_t kw = 0; kw < g.k; ++kw) {
            const T wv = wt[((oc * g.cin + ic) * g.k + kh) * g.k + kw];
            std::size_t lo, hi;
            col_range(g, kw, lo, hi);
            for (std::size_t oh = 0; oh < g.ho; ++oh) {
              const long ih = static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.pad);
              if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
              T* row = gin + static_cast<std::size_t>(ih) * g.w;
              const T* grow = gout + oh * g.wo;
              for (std::size_t ow = lo; ow < hi; ++ow)
                row[ow * g.stride + kw - g.pad] += wv * grow[ow];
            }
          }
        }
      }
    }
  });
}

template <class T>
void conv_backward_weight(const ConvGeom& g, const T* dy, const T* x, T* dw) {
  parallel_for(g.cout, [&](std::size_t begin, std::size_t end) {
    for (std::size_t oc = begin; oc < end; ++oc) {
      for (std::size_t ic = 0; ic < g.cin; ++ic) {
        for (std::size_t kh = 0; kh < g.k; ++kh) {
          for (std::size_t kw = 0; kw < g.k; ++kw) {
            std::size_t lo, hi;
            col_range(g, kw, lo, hi);
            T acc = 0;
            for (std::size_t n = 0; n < g.n; ++n) {
              const T* in = x + (n * g.cin + ic) * g.h * g.w;
              const T* gout = dy + (n * g.cout + oc) * g.ho * g.wo;
              for (std::size_t oh = 0; oh < g.ho; ++oh) {
                const long ih = static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.pad);
                if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
                const T* row = in + static_cast<std::size_t>(ih) * g.w;
                const T* grow = gout + oh * g.wo;
                for (std::size_t ow = lo; ow < hi; ++ow)
                  acc += grow[ow] * row[ow * g.stride + kw - g.pad];
              }
            }
            dw[((oc * g.cin + ic) * g.k + kh) * g.k + kw] += acc;
          }
        }
      }
    }
  });
}

template <class T>
void bias_backward(std::size_t n, std::size_t c, std::size_t plane, const T* dy, T* db) {
  for (std::size_t oc = 0; oc < c; ++oc) {
    T acc = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const T* g = dy + (b * c + oc) * plane;
      for (std::size_t i = 0; i < plane; ++i) acc += g[i];
    }
    db[oc] += acc;
  }
}

void check_bias(const char* op, const Tensor& bias, std::size_t channels, const Tensor& ref) {
  if (!bias.defined()) return;
  require_same_dtype(op, ref, bias);
  if (bias.rank() != 1 || bias.dim(0) != channels)
    throw DimensionError(std::string(op) + ": bias shape " + shape_str(bias.shape()) +
                         " does not match " + std::to_string(channels) + " output channels");
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t zero_pad) {
  require_rank("conv2d", input, 4);
  require_rank("conv2d", weight, 4);
  require_same_dtype("conv2d", input, weight);
  if (weight.dim(1) != input.dim(1))
    throw DimensionError("conv2d: input has " + std::to_string(input.dim(1)) +
                         " channels, weight expects " + std::to_string(weight.dim(1)));
  if (weight.dim(2) != weight.dim(3) || weight.dim(2) < 1)
    throw DimensionError("conv2d: kernel must be square, got " + shape_str(weight.shape()));
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
  ConvGeom g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), weight.dim(0),
             weight.dim(2), stride, zero_pad, 0, 0};
  const long span_h = static_cast<long>(g.h + 2 * g.pad) - static_cast<long>(g.k);
  const long span_w = static_cast<long>(g.w + 2 * g.pad) - static_cast<long>(g.k);
  if (span_h < 0 || span_w < 0 || span_h % static_cast<long>(stride) != 0 ||
      span_w % static_cast<long>(stride) != 0)
    throw DimensionError("conv2d: output extent is not a positive integer for input " +
                         shape_str(input.shape()) + ", kernel " + std::to_string(g.k) +
                         ", stride " + std::to_string(stride) + ", pad " +
                         std::to_string(zero_pad));
  g.ho = static_cast<std::size_t>(span_h) / stride + 1;
  g.wo = static_cast<std::size_t>(span_w) / stride + 1;
  check_bias("conv2d", bias, g.cout, input);

  Tensor out = Tensor::zeros({g.n, g.cout, g.ho, g.wo}, input.dtype());
  dispatch(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    conv_forward<T>(g, input.data<T>().data(), weight.data<T>().data(),
                    bias.defined() ? bias.data<T>().data() : nullptr, out.data<T>().data());
  });
  const bool has_bias = bias.defined();
  return finish(out, OpKind::conv2d, {input, weight, bias},
                [g, has_bias](const TensorImpl& o, std::span<const ImplPtr> in) {
                  dispatch(o.dtype, [&](auto tag) {
                    using T = decltype(tag);
                    const T* dy = detail::out_grad<T>(o);
                    if (T* dx = detail::grad_ptr<T>(*in[0]))
                      conv_backward_input<T>(g, dy, detail::data_ptr<T>(*in[1]), dx);
                    if (T* dw = detail::grad_ptr<T>(*in[1]))
                      conv_backward_weight<T>(g, dy, detail::data_ptr<T>(*in[0]), dw);
                    if (has_bias)
                      if (T* db = detail::grad_ptr<T>(*in[2]))
                        bias_backward<T>(g.n, g.cout, g.ho * g.wo, dy, db);
                  });
                });
}

Tensor deconv2d(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  require_rank("deconv2d", input, 4);
  require_rank("deconv2d", weight, 4);
  require_same_dtype("deconv2d", input, weight);
  if (weight.dim(0) != input.dim(1) || weight.dim(2) != 2 || weight.dim(3) != 2)
    throw DimensionError("deconv2d: weight " + shape_str(weight.shape()) +
                         " incompatible with input " + shape_str(input.shape()) +
                         " (expected [Cin,Cout,2,2])");
  const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t cout = weight.dim(1), ho = 2 * h, wo = 2 * w;
  check_bias("deconv2d", bias, cout, input);

  Tensor out = Tensor::zeros({n, cout, ho, wo}, input.dtype());
  dispatch(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* x = input.data<T>().data();
    const T* wt = weight.data<T>().data();
    const T* b = bias.defined() ? bias.data<T>().data() : nullptr;
    T* y = out.data<T>().data();
    parallel_for(n * cout, [&](std::size_t begin, std::size_t end) {
      for (std::size_t job = begin; job < end; ++job) {
        const std::size_t bn = job / cout, oc = job % cout;
        T* o = y + job * ho * wo;
        std::fill(o, o + ho * wo, b ? b[oc] : T(0));
        for (std::size_t ic = 0; ic < cin; ++ic) {
          const T* in = x + (bn * cin + ic) * h * w;
          const T* k = wt + (ic * cout + oc) * 4;
          for (std::size_t r = 0; r < h; ++r)
            for (std::size_t c = 0; c < w; ++c) {
              const T v = in[r * w + c];
              T* base = o + (2 * r) * wo + 2 * c;
              base[0] += v * k[0];
              base[1] += v * k[1];
              base[wo] += v * k[2];
              base[wo + 1] += v * k[3];
            }
        }
      }
    });
  });
  const bool has_bias = bias.defined();
  return finish(
      out, OpKind::deconv2d, {input, weight, bias},
      [=](const TensorImpl& o, std::span<const ImplPtr> in) {
        dispatch(o.dtype, [&](auto tag) {
          using T = decltype(tag);
          const T* dy = detail::out_grad<T>(o);
          const T* x = detail::data_ptr<T>(*in[0]);
          const T* wt = detail::data_ptr<T>(*in[1]);
          if (T* dx = detail::grad_ptr<T>(*in[0])) {
            parallel_for(n * cin, [&](std::size_t begin, std::size_t end) {
              for (std::size_t job = begin; job < end; ++job) {
                const std::size_t bn = job / cin, ic = job % cin;
                T* gi = dx + job * h * w;
                for (std::size_t oc = 0; oc < cout; ++oc) {
                  const T* go = dy + (bn * cout + oc) * ho * wo;
                  const T* k = wt + (ic * cout + oc) * 4;
                  for (std::size_t r = 0; r < h; ++r)
                    for (std::size_t c = 0; c < w; ++c) {
                      const T* base = go + (2 * r) * wo + 2 * c;
                      gi[r * w + c] += base[0] * k[0] + base[1] * k[1] + base[wo] * k[2] +
                                       base[wo + 1] * k[3];
                    }
                }
              }
            });
          }
          if (T* dw = detail::grad_ptr<T>(*in[1])) {
            parallel_for(cin, [&](std::size_t begin, std::size_t end) {
              for (std::size_t ic = begin; ic < end; ++ic)
                for (std::size_t oc = 0; oc < cout; ++oc) {
                  T acc[4] = {0, 0, 0, 0};
                  for (std::size_t bn = 0; bn < n; ++bn) {
                    const T* xi = x + (bn * cin + ic) * h * w;
                    const T* go = dy + (bn * cout + oc) * ho * wo;
                    for (std::size_t r = 0; r < h; ++r)
                      for (std::size_t c = 0; c < w; ++c) {
                        const T v = xi[r * w + c];
                        const T* base = go + (2 * r) * wo + 2 * c;
                        acc[0] += v * base[0];
                        acc[1] += v * base[1];
                        acc[2] += v * base[wo];
                        acc[3] += v * base[wo + 1];
                      }
                  }
                  T* k = dw + (ic * cout + oc) * 4;
                  for (int i = 0; i < 4; ++i) k[i] += acc[i];
                }
            });
          }
          if (has_bias)
            if (T* db = detail::grad_ptr<T>(*in[2])) bias_backward<T>(n, cout, ho * wo, dy, db);
        });
      });
}

Tensor maxpool2d(const Tensor& input) {
  require_rank("maxpool2d", input, 4);
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2 || w % 2)
    throw DimensionError("maxpool2d: spatial extents must be even, got " +
                         shape_str(input.shape()));
  const std::size_t ho = h / 2, wo = w / 2;
  Tensor out = Tensor::zeros({n, c, ho, wo}, input.dtype());
  // Flat input index of the selected element for each output.
  std::vector<std::uint32_t> argmax(n * c * ho * wo);
  dispatch(input.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* x = input.data<T>().data();
    for (std::size_t p = 0; p < n * c; ++p) {
      const T* in = x + p * h * w;
      for (std::size_t r = 0; r < ho; ++r)
        for (std::size_t q = 0; q < wo; ++q) {
          std::size_t best = (2 * r) * w + 2 * q;
          const std::size_t cand[3] = {best + 1, best + w, best + w + 1};
          for (auto ci : cand)
            if (in[ci] > in[best]) best = ci;
          argmax[(p * ho + r) * wo + q] = static_cast<std::uint32_t>(p * h * w + best);
        }
    }
    if (auto* pattern = ActivationPattern::current()) pattern->pool_pattern(argmax);
    T* y = out.data<T>().data();
    for (std::size_t i = 0; i < argmax.size(); ++i) y[i] = x[argmax[i]];
  });
  return finish(out, OpKind::maxpool2d, {input},
                [argmax = std::move(argmax)](const TensorImpl& o, std::span<const ImplPtr> in) {
                  dispatch(o.dtype, [&](auto tag) {
                    using T = decltype(tag);
                    const T* dy = detail::out_grad<T>(o);
                    if (T* dx = detail::grad_ptr<T>(*in[0]))
                      for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += dy[i];
                  });
                });
}

}  // namespace waunet::ops
