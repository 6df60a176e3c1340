#include "waunet/attention/axial_attention.hpp"

#include <algorithm>
#include <cmath>

#include "waunet/tensor/op_builder.hpp"
#include "waunet/tensor/ops.hpp"
#include "waunet/tensor/parallel.hpp"

namespace waunet::attn {

using ops::internal::ImplPtr;
using ops::internal::TensorImpl;

namespace {

Tensor normal_tensor(const Shape& s, double stddev, DType dtype, Rng& rng) {
  std::vector<double> v(numel(s));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor::from_values(s, v, dtype, true);
}

Tensor uniform_tensor(const Shape& s, double bound, DType dtype, Rng& rng) {
  std::vector<double> v(numel(s));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::from_values(s, v, dtype, true);
}

// Geometry of one axial pass over an [N, C, H, W] tensor.
struct AxialGeom {
  std::size_t n, channels, h, w, heads, dk;
  std::size_t len;        // attended axis extent
  std::size_t lines;      // extent of the other axis
  std::size_t pos_stride; // flat step between neighbours along the attended axis
  std::size_t line_stride;
  std::size_t table_len;  // rows of each positional table
  std::size_t plane() const { return h * w; }
  std::size_t base(std::size_t b, std::size_t head, std::size_t line) const {
    return (b * channels + head * dk) * plane() + line * line_stride;
  }
  // Table row for key position p relative to query o.
  std::size_t row(std::size_t o, std::size_t p) const {
    return (table_len - 1) / 2 + p - o;
  }
};

AxialGeom make_geom(const Qkv& qkv, const Tensor& rq, std::size_t heads, Axis axis) {
  const Tensor& q = qkv.q;
  if (q.rank() != 4) throw DimensionError("axial attention expects [N,C,H,W] queries");
  for (const Tensor* t : {&qkv.k, &qkv.v})
    if (t->shape() != q.shape() || t->dtype() != q.dtype())
      throw DimensionError("axial attention: Q, K and V must share shape and dtype");
  AxialGeom g{};
  g.n = q.dim(0);
  g.channels = q.dim(1);
  g.h = q.dim(2);
  g.w = q.dim(3);
  g.heads = heads;
  if (heads == 0 || g.channels % heads)
    throw ConfigError("axial attention: " + std::to_string(g.channels) +
                      " channels not divisible by " + std::to_string(heads) + " heads");
  g.dk = g.channels / heads;
  if (axis == Axis::width) {
    g.len = g.w;
    g.lines = g.h;
    g.pos_stride = 1;
    g.line_stride = g.w;
  } else {
    g.len = g.h;
    g.lines = g.w;
    g.pos_stride = g.w;
    g.line_stride = 1;
  }
  if (rq.rank() != 3 || rq.dim(0) != heads || rq.dim(2) != g.dk || rq.dim(1) % 2 == 0)
    throw ConfigError("axial attention: positional table shape " + shape_str(rq.shape()) +
                      " does not match heads=" + std::to_string(heads) +
                      ", d_k=" + std::to_string(g.dk));
  g.table_len = rq.dim(1);
  if ((g.table_len - 1) / 2 + 1 < g.len)
    throw ConfigError("axial attention: axis length " + std::to_string(g.len) +
                      " exceeds positional table coverage of " +
                      std::to_string((g.table_len - 1) / 2 + 1));
  return g;
}

// Gathers the d_k-vectors of one head along one line into [len][dk] rows.
template <class T>
void gather(const AxialGeom& g, const T* src, std::size_t base, T* dst) {
  for (std::size_t p = 0; p < g.len; ++p)
    for (std::size_t d = 0; d < g.dk; ++d) dst[p * g.dk + d] = src[base + d * g.plane() + p * g.pos_stride];
}

template <class T>
void scatter_add(const AxialGeom& g, const T* src, std::size_t base, T* dst) {
  for (std::size_t p = 0; p < g.len; ++p)
    for (std::size_t d = 0; d < g.dk; ++d) dst[base + d * g.plane() + p * g.pos_stride] += src[p * g.dk + d];
}

template <class T>
T dot(const T* a, const T* b, std::size_t n) {
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

// Softmax weights for one (batch, head, line); `a` is [len][len].
template <class T>
void line_weights(const AxialGeom& g, const T* qv, const T* kv, const T* rq, const T* rk, T* a) {
  const T scale = T(1) / std::sqrt(static_cast<T>(g.dk));
  for (std::size_t o = 0; o < g.len; ++o) {
    T* row = a + o * g.len;
    const T* qo = qv + o * g.dk;
    T mx = -INFINITY;
    for (std::size_t p = 0; p < g.len; ++p) {
      const T* kp = kv + p * g.dk;
      const std::size_t t = g.row(o, p);
      T logit = scale * dot(qo, kp, g.dk);
      if (rq) logit += dot(qo, rq + t * g.dk, g.dk) + dot(kp, rk + t * g.dk, g.dk);
      row[p] = logit;
      mx = std::max(mx, logit);
    }
    T total = 0;
    for (std::size_t p = 0; p < g.len; ++p) {
      row[p] = std::exp(row[p] - mx);
      total += row[p];
    }
    for (std::size_t p = 0; p < g.len; ++p) row[p] /= total;
  }
}

template <class T>
void core_forward(const AxialGeom& g, const Qkv& qkv, const Tensor& rq_t, const Tensor& rk_t,
                  const Tensor& rv_t, T* y, T* weights) {
  const T* q = qkv.q.data<T>().data();
  const T* k = qkv.k.data<T>().data();
  const T* v = qkv.v.data<T>().data();
  const T* rq = rq_t.data<T>().data();
  const T* rk = rk_t.data<T>().data();
  const T* rv = rv_t.data<T>().data();
  const std::size_t tsz = g.table_len * g.dk;
  const std::size_t jobs = g.n * g.heads * g.lines;
  parallel_for(jobs, [&](std::size_t begin, std::size_t end) {
    std::vector<T> qv(g.len * g.dk), kv(g.len * g.dk), vv(g.len * g.dk), out(g.len * g.dk);
    for (std::size_t job = begin; job < end; ++job) {
      const std::size_t b = job / (g.heads * g.lines);
      const std::size_t head = (job / g.lines) % g.heads;
      const std::size_t line = job % g.lines;
      const std::size_t base = g.base(b, head, line);
      gather(g, q, base, qv.data());
      gather(g, k, base, kv.data());
      gather(g, v, base, vv.data());
      T* a = weights + job * g.len * g.len;
      line_weights(g, qv.data(), kv.data(), rq + head * tsz, rk + head * tsz, a);
      const T* rvh = rv + head * tsz;
      std::fill(out.begin(), out.end(), T(0));
      for (std::size_t o = 0; o < g.len; ++o)
        for (std::size_t p = 0; p < g.len; ++p) {
          const T w = a[o * g.len + p];
          const T* vp = vv.data() + p * g.dk;
          const T* rp = rvh + g.row(o, p) * g.dk;
          T* yo = out.data() + o * g.dk;
          for (std::size_t d = 0; d < g.dk; ++d) yo[d] += w * (vp[d] + rp[d]);
        }
      for (std::size_t p = 0; p < g.len; ++p)
        for (std::size_t d = 0; d < g.dk; ++d)
          y[base + d * g.plane() + p * g.pos_stride] = out[p * g.dk + d];
    }
  });
  const std::uint64_t pairs = static_cast<std::uint64_t>(jobs) * g.len * g.len * g.dk;
  auto& c = kernel_counters();
  c.axial_score_macs += pairs;
  c.axial_positional_macs += 2 * pairs;
  c.axial_aggregate_macs += pairs;
}

template <class T>
void core_backward(const AxialGeom& g, const TensorImpl& out, std::span<const ImplPtr> in,
                   const std::vector<T>& weights) {
  const T* dy = detail::out_grad<T>(out);
  const T* q = detail::data_ptr<T>(*in[0]);
  const T* k = detail::data_ptr<T>(*in[1]);
  const T* v = detail::data_ptr<T>(*in[2]);
  const T* rq = detail::data_ptr<T>(*in[3]);
  const T* rk = detail::data_ptr<T>(*in[4]);
  const T* rv = detail::data_ptr<T>(*in[5]);
  T* dq = detail::grad_ptr<T>(*in[0]);
  T* dk = detail::grad_ptr<T>(*in[1]);
  T* dv = detail::grad_ptr<T>(*in[2]);
  T* drq = detail::grad_ptr<T>(*in[3]);
  T* drk = detail::grad_ptr<T>(*in[4]);
  T* drv = detail::grad_ptr<T>(*in[5]);
  const T scale = T(1) / std::sqrt(static_cast<T>(g.dk));
  const std::size_t tsz = g.table_len * g.dk;
  const std::size_t L = g.len, D = g.dk;
  // One job per head: the positional tables are per head, so table
  // gradients accumulate in a fixed order regardless of threading.
  parallel_for(g.heads, [&](std::size_t begin, std::size_t end) {
    std::vector<T> qv(L * D), kv(L * D), vv(L * D), gy(L * D);
    std::vector<T> gq(L * D), gk(L * D), gv(L * D), da(L * L);
    for (std::size_t head = begin; head < end; ++head) {
      const T* rqh = rq + head * tsz;
      const T* rkh = rk + head * tsz;
      const T* rvh = rv + head * tsz;
      for (std::size_t b = 0; b < g.n; ++b)
        for (std::size_t line = 0; line < g.lines; ++line) {
          const std::size_t base = g.base(b, head, line);
          const std::size_t job = (b * g.heads + head) * g.lines + line;
          const T* a = weights.data() + job * L * L;
          gather(g, q, base, qv.data());
          gather(g, k, base, kv.data());
          gather(g, v, base, vv.data());
          gather(g, dy, base, gy.data());
          std::fill(gq.begin(), gq.end(), T(0));
          std::fill(gk.begin(), gk.end(), T(0));
          std::fill(gv.begin(), gv.end(), T(0));
          for (std::size_t o = 0; o < L; ++o) {
            const T* gyo = gy.data() + o * D;
            T weighted = 0;
            for (std::size_t p = 0; p < L; ++p) {
              const std::size_t t = g.row(o, p);
              const T w = a[o * L + p];
              const T* vp = vv.data() + p * D;
              const T* rvp = rvh + t * D;
              T s = 0;
              for (std::size_t d = 0; d < D; ++d) s += gyo[d] * (vp[d] + rvp[d]);
              da[o * L + p] = s;
              weighted += w * s;
              for (std::size_t d = 0; d < D; ++d) gv[p * D + d] += w * gyo[d];
              if (drv)
                for (std::size_t d = 0; d < D; ++d) drv[head * tsz + t * D + d] += w * gyo[d];
            }
            const T* qo = qv.data() + o * D;
            for (std::size_t p = 0; p < L; ++p) {
              const std::size_t t = g.row(o, p);
              const T dl = a[o * L + p] * (da[o * L + p] - weighted);
              const T* kp = kv.data() + p * D;
              const T* rqt = rqh + t * D;
              const T* rkt = rkh + t * D;
              for (std::size_t d = 0; d < D; ++d) {
                gq[o * D + d] += dl * (scale * kp[d] + rqt[d]);
                gk[p * D + d] += dl * (scale * qo[d] + rkt[d]);
              }
              if (drq)
                for (std::size_t d = 0; d < D; ++d) drq[head * tsz + t * D + d] += dl * qo[d];
              if (drk)
                for (std::size_t d = 0; d < D; ++d) drk[head * tsz + t * D + d] += dl * kp[d];
            }
          }
          if (dq) scatter_add(g, gq.data(), base, dq);
          if (dk) scatter_add(g, gk.data(), base, dk);
          if (dv) scatter_add(g, gv.data(), base, dv);
        }
    }
  });
}

void check_tables(const Tensor& rq, const Tensor& rk, const Tensor& rv) {
  if (rk.shape() != rq.shape() || rv.shape() != rq.shape())
    throw ConfigError("axial attention: positional tables must share one shape");
}

}  // namespace

AttentionLayerParams AttentionLayerParams::init(std::size_t d_model, std::size_t heads,
                                                std::size_t axis_len, DType dtype, Rng& rng) {
  if (heads == 0 || d_model % heads)
    throw ConfigError("attention: d_model " + std::to_string(d_model) +
                      " not divisible by heads " + std::to_string(heads));
  if (axis_len == 0) throw ConfigError("attention: axis length must be positive");
  AttentionLayerParams p;
  p.heads = heads;
  p.d_model = d_model;
  p.d_k = d_model / heads;
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(d_model));
  const std::size_t inner = heads * p.d_k;
  p.wq = normal_tensor({inner, d_model, 1, 1}, proj_std, dtype, rng);
  p.wk = normal_tensor({inner, d_model, 1, 1}, proj_std, dtype, rng);
  p.wv = normal_tensor({inner, d_model, 1, 1}, proj_std, dtype, rng);
  p.w_out = Tensor::zeros({d_model, inner, 1, 1}, dtype, true);
  const double bound = 1.0 / std::sqrt(static_cast<double>(p.d_k));
  const Shape table{heads, 2 * axis_len - 1, p.d_k};
  p.rq = uniform_tensor(table, bound, dtype, rng);
  p.rk = uniform_tensor(table, bound, dtype, rng);
  p.rv = uniform_tensor(table, bound, dtype, rng);
  return p;
}

std::size_t AttentionLayerParams::max_axis_len() const { return (rq.dim(1) - 1) / 2 + 1; }

std::vector<std::pair<std::string, Tensor>> AttentionLayerParams::named_tensors(
    const std::string& prefix) const {
  return {{prefix + ".wq", wq}, {prefix + ".wk", wk}, {prefix + ".wv", wv},
          {prefix + ".w_out", w_out}, {prefix + ".rq", rq}, {prefix + ".rk", rk},
          {prefix + ".rv", rv}};
}

Qkv qkv_project(const Tensor& x, const AttentionLayerParams& params) {
  if (x.rank() != 4 || x.dim(1) != params.d_model)
    throw DimensionError("qkv_project: input " + shape_str(x.shape()) + " does not have " +
                         std::to_string(params.d_model) + " channels");
  return {ops::conv2d(x, params.wq), ops::conv2d(x, params.wk), ops::conv2d(x, params.wv)};
}

Tensor axial_attention_core(const Qkv& qkv, const Tensor& rq, const Tensor& rk, const Tensor& rv,
                            std::size_t heads, Axis axis) {
  check_tables(rq, rk, rv);
  const AxialGeom g = make_geom(qkv, rq, heads, axis);
  for (const Tensor* t : {&rq, &rk, &rv})
    if (t->dtype() != qkv.q.dtype()) throw UsageError("axial attention: dtype mismatch");
  Tensor out = Tensor::zeros(qkv.q.shape(), qkv.q.dtype());
  return dispatch(qkv.q.dtype(), [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> weights(g.n * g.heads * g.lines * g.len * g.len);
    core_forward<T>(g, qkv, rq, rk, rv, out.data<T>().data(), weights.data());
    return ops::internal::finish(
        out, OpKind::axial_attention, {qkv.q, qkv.k, qkv.v, rq, rk, rv},
        [g, weights = std::move(weights)](const TensorImpl& o, std::span<const ImplPtr> in) {
          core_backward<T>(g, o, in, weights);
        });
  });
}

Tensor axial_attention_weights(const Qkv& qkv, const Tensor& rq, const Tensor& rk,
                               std::size_t heads, Axis axis) {
  const AxialGeom g = make_geom(qkv, rq, heads, axis);
  Tensor out = Tensor::zeros({g.n, g.heads, g.lines, g.len, g.len}, qkv.q.dtype());
  dispatch(qkv.q.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const std::size_t tsz = g.table_len * g.dk;
    std::vector<T> qv(g.len * g.dk), kv(g.len * g.dk);
    T* a = out.data<T>().data();
    for (std::size_t b = 0; b < g.n; ++b)
      for (std::size_t head = 0; head < g.heads; ++head)
        for (std::size_t line = 0; line < g.lines; ++line) {
          const std::size_t base = g.base(b, head, line);
          gather(g, qkv.q.data<T>().data(), base, qv.data());
          gather(g, qkv.k.data<T>().data(), base, kv.data());
          const std::size_t job = (b * g.heads + head) * g.lines + line;
          line_weights(g, qv.data(), kv.data(), rq.data<T>().data() + head * tsz,
                       rk.data<T>().data() + head * tsz, a + job * g.len * g.len);
        }
  });
  return out;
}

Tensor axial_attend(const Tensor& x, const AttentionLayerParams& params, Axis axis) {
  Qkv qkv = qkv_project(x, params);
  Tensor y = axial_attention_core(qkv, params.rq, params.rk, params.rv, params.heads, axis);
  return ops::conv2d(y, params.w_out);
}

Tensor full_attention_reference(const Tensor& x, const AttentionLayerParams& params) {
  Qkv qkv = qkv_project(x, params);
  const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3), tokens = h * w;
  const std::size_t heads = params.heads, dk = params.d_k;
  // [N, C, H, W] -> [N*heads, tokens, dk]
  auto token_major = [&](const Tensor& t) {
    return ops::reshape(ops::permute(ops::reshape(t, {n, heads, dk, tokens}), {0, 1, 3, 2}),
                        {n * heads, tokens, dk});
  };
  Tensor q = token_major(qkv.q);
  Tensor kt = ops::reshape(qkv.k, {n * heads, dk, tokens});
  Tensor v = token_major(qkv.v);
  Tensor scores = ops::scale(ops::matmul(q, kt), 1.0 / std::sqrt(static_cast<double>(dk)));
  Tensor y = ops::matmul(ops::softmax(scores, 2), v);
  y = ops::reshape(ops::permute(ops::reshape(y, {n, heads, tokens, dk}), {0, 1, 3, 2}),
                   {n, heads * dk, h, w});
  return ops::conv2d(y, params.w_out);
}

AttentionBlockParams AttentionBlockParams::init(const AttentionBlockSpec& spec,
                                                std::size_t channels, std::size_t height,
                                                std::size_t width, DType dtype, Rng& rng) {
  if (spec.depth == 0) throw ConfigError("attention block depth must be >= 1");
  AttentionBlockParams p;
  for (std::size_t i = 0; i < spec.depth; ++i) {
    AxialLayer layer;
    layer.height = AttentionLayerParams::init(channels, spec.heads, height, dtype, rng);
    layer.width = AttentionLayerParams::init(channels, spec.heads, width, dtype, rng);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

std::vector<std::pair<std::string, Tensor>> AttentionBlockParams::named_tensors(
    const std::string& prefix) const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string lp = prefix + ".layer" + std::to_string(i);
    for (auto& nt : layers[i].height.named_tensors(lp + ".height")) out.push_back(nt);
    for (auto& nt : layers[i].width.named_tensors(lp + ".width")) out.push_back(nt);
  }
  return out;
}

Tensor attention_block(const Tensor& x, const AttentionBlockParams& params) {
  if (params.layers.empty()) throw ConfigError("attention block has no layers");
  Tensor h = x;
  for (const auto& layer : params.layers) {
    h = ops::add(h, axial_attend(h, layer.height, Axis::height));
    h = ops::add(h, axial_attend(h, layer.width, Axis::width));
  }
  return h;
}

std::uint64_t count_attention_flops(std::size_t height, std::size_t width, std::size_t channels,
                                    AttentionMode mode) {
  const std::uint64_t tokens = static_cast<std::uint64_t>(height) * width;
  if (mode == AttentionMode::full) return 2 * channels * tokens * tokens;
  return 2 * channels * tokens * (height + width);
}

}  // namespace waunet::attn
