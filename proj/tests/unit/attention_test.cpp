#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "test_support.hpp"
#include "waunet/attention/axial_attention.hpp"
#include "waunet/tensor/grad_check.hpp"
#include "waunet/tensor/ops.hpp"
#include "waunet/tensor/parallel.hpp"

using namespace waunet;
using namespace waunet::attn;
using waunet::test::max_abs_diff;
using waunet::test::random_tensor;

namespace {

struct Dims {
  std::size_t n, c, h, w;
  std::size_t at(std::size_t b, std::size_t ch, std::size_t r, std::size_t col) const {
    return ((b * c + ch) * h + r) * w + col;
  }
};

Dims dims_of(const Tensor& t) { return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)}; }

// Y[b,o,:,:] = sum_i W[o,i] X[b,i,:,:]
std::vector<double> project_oracle(const Tensor& x, const Tensor& w) {
  const Dims d = dims_of(x);
  const std::size_t co = w.dim(0);
  auto xv = x.to_vector(), wv = w.to_vector();
  std::vector<double> out(d.n * co * d.h * d.w, 0.0);
  Dims od{d.n, co, d.h, d.w};
  for (std::size_t b = 0; b < d.n; ++b)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t i = 0; i < d.c; ++i)
        for (std::size_t r = 0; r < d.h; ++r)
          for (std::size_t col = 0; col < d.w; ++col)
            out[od.at(b, o, r, col)] += wv[o * d.c + i] * xv[d.at(b, i, r, col)];
  return out;
}

// Direct per-query evaluation of the axial core formula.
std::vector<double> axial_oracle(const Tensor& qt, const Tensor& kt, const Tensor& vt,
                                 const Tensor& rqt, const Tensor& rkt, const Tensor& rvt,
                                 std::size_t heads, Axis axis) {
  const Dims d = dims_of(qt);
  const std::size_t dk = d.c / heads, T = rqt.dim(1), center = (T - 1) / 2;
  auto q = qt.to_vector(), k = kt.to_vector(), v = vt.to_vector();
  auto rq = rqt.to_vector(), rk = rkt.to_vector(), rv = rvt.to_vector();
  const bool along_w = axis == Axis::width;
  const std::size_t len = along_w ? d.w : d.h;
  std::vector<double> out(q.size(), 0.0);
  auto tab = [&](const std::vector<double>& t, std::size_t hd, long off, std::size_t e) {
    return t[(hd * T + center + off) * dk + e];
  };
  for (std::size_t b = 0; b < d.n; ++b)
    for (std::size_t hd = 0; hd < heads; ++hd)
      for (std::size_t r = 0; r < d.h; ++r)
        for (std::size_t col = 0; col < d.w; ++col) {
          const std::size_t o = along_w ? col : r;
          auto idx = [&](std::size_t p, std::size_t e) {
            return along_w ? d.at(b, hd * dk + e, r, p) : d.at(b, hd * dk + e, p, col);
          };
          std::vector<double> logits(len);
          for (std::size_t p = 0; p < len; ++p) {
            const long off = static_cast<long>(p) - static_cast<long>(o);
            double s = 0;
            for (std::size_t e = 0; e < dk; ++e) {
              s += q[idx(o, e)] * k[idx(p, e)] / std::sqrt(double(dk));
              s += q[idx(o, e)] * tab(rq, hd, off, e);
              s += k[idx(p, e)] * tab(rk, hd, off, e);
            }
            logits[p] = s;
          }
          const double mx = *std::max_element(logits.begin(), logits.end());
          double z = 0;
          for (auto& l : logits) z += (l = std::exp(l - mx));
          for (std::size_t e = 0; e < dk; ++e) {
            double y = 0;
            for (std::size_t p = 0; p < len; ++p) {
              const long off = static_cast<long>(p) - static_cast<long>(o);
              y += logits[p] / z * (v[idx(p, e)] + tab(rv, hd, off, e));
            }
            out[idx(o, e)] = y;
          }
        }
  return out;
}

// Dense softmax(QK^T/sqrt(dk))V over all tokens, then the output projection.
std::vector<double> full_oracle(const Tensor& x, const AttentionLayerParams& p) {
  const Dims d = dims_of(x);
  auto q = project_oracle(x, p.wq), k = project_oracle(x, p.wk), v = project_oracle(x, p.wv);
  const std::size_t tokens = d.h * d.w, dk = p.d_k, inner = p.heads * dk;
  std::vector<double> y(d.n * inner * tokens, 0.0);
  for (std::size_t b = 0; b < d.n; ++b)
    for (std::size_t hd = 0; hd < p.heads; ++hd)
      for (std::size_t i = 0; i < tokens; ++i) {
        auto at = [&](const std::vector<double>& t, std::size_t tok, std::size_t e) {
          return t[(b * inner + hd * dk + e) * tokens + tok];
        };
        std::vector<double> s(tokens);
        for (std::size_t j = 0; j < tokens; ++j) {
          double acc = 0;
          for (std::size_t e = 0; e < dk; ++e) acc += at(q, i, e) * at(k, j, e);
          s[j] = acc / std::sqrt(double(dk));
        }
        const double mx = *std::max_element(s.begin(), s.end());
        double z = 0;
        for (auto& e : s) z += (e = std::exp(e - mx));
        for (std::size_t e = 0; e < dk; ++e) {
          double acc = 0;
          for (std::size_t j = 0; j < tokens; ++j) acc += s[j] / z * at(v, j, e);
          y[(b * inner + hd * dk + e) * tokens + i] = acc;
        }
      }
  Tensor yt = Tensor::from_values({d.n, inner, d.h, d.w}, y, DType::f64);
  return project_oracle(yt, p.w_out);
}

AttentionLayerParams random_layer(std::size_t c, std::size_t heads, std::size_t axis_len,
                                  DType dtype, Rng& rng) {
  auto p = AttentionLayerParams::init(c, heads, axis_len, dtype, rng);
  p.w_out = random_tensor(p.w_out.shape(), rng, dtype, -0.5, 0.5, true);
  return p;
}

void zero_tables(AttentionLayerParams& p) {
  for (Tensor* t : {&p.rq, &p.rk, &p.rv}) *t = Tensor::zeros(t->shape(), t->dtype(), true);
}

Tensor identity_kernel(std::size_t c, DType dtype) {
  Tensor w = Tensor::zeros({c, c, 1, 1}, dtype, true);
  for (std::size_t i = 0; i < c; ++i) w.set({i, i, 0, 0}, 1.0);
  return w;
}

}  // namespace

TEST_CASE("qkv_project: zero weights, identity values, matmul oracle") {
  Rng rng(1);
  auto p = AttentionLayerParams::init(4, 1, 5, DType::f64, rng);
  Tensor x = random_tensor({2, 4, 3, 5}, rng);

  SUBCASE("zero weights give zero Q, K, V") {
    p.wq = p.wk = p.wv = Tensor::zeros({4, 4, 1, 1}, DType::f64);
    auto qkv = qkv_project(x, p);
    for (const Tensor* t : {&qkv.q, &qkv.k, &qkv.v})
      for (double e : t->to_vector()) CHECK(e == 0.0);
  }
  SUBCASE("identity value projection reproduces the input") {
    p.wv = identity_kernel(4, DType::f64);
    CHECK(qkv_project(x, p).v.to_vector() == x.to_vector());
  }
  SUBCASE("matches a direct matrix product") {
    auto qkv = qkv_project(x, p);
    CHECK(max_abs_diff(qkv.q.to_vector(), project_oracle(x, p.wq)) < 1e-6);
    CHECK(max_abs_diff(qkv.k.to_vector(), project_oracle(x, p.wk)) < 1e-6);
    CHECK(max_abs_diff(qkv.v.to_vector(), project_oracle(x, p.wv)) < 1e-6);
  }
  SUBCASE("channel mismatch") {
    CHECK_THROWS_AS(qkv_project(random_tensor({1, 3, 2, 2}, rng), p), DimensionError);
  }
}

TEST_CASE("uniform weights: a width-constant input maps to itself along width") {
  Rng rng(2);
  const std::size_t c = 4, h = 3, w = 6;
  auto p = AttentionLayerParams::init(c, 2, w, DType::f64, rng);
  zero_tables(p);
  p.wq = p.wk = Tensor::zeros({c, c, 1, 1}, DType::f64);
  p.wv = identity_kernel(c, DType::f64);
  Tensor x = Tensor::zeros({1, c, h, w}, DType::f64);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t r = 0; r < h; ++r) {
      const double value = rng.uniform(-1, 1);
      for (std::size_t col = 0; col < w; ++col) x.set({0, ch, r, col}, value);
    }
  auto qkv = qkv_project(x, p);
  Tensor y = axial_attention_core(qkv, p.rq, p.rk, p.rv, p.heads, Axis::width);
  CHECK(max_abs_diff(y.to_vector(), x.to_vector()) < 1e-12);
}

TEST_CASE("singleton axis: output is v plus the centre value encoding") {
  Rng rng(3);
  const std::size_t c = 4, heads = 2, dk = 2;
  auto p = AttentionLayerParams::init(c, heads, 1, DType::f64, rng);
  Tensor x = random_tensor({1, c, 3, 1}, rng);
  auto qkv = qkv_project(x, p);
  Tensor core = axial_attention_core(qkv, p.rq, p.rk, p.rv, heads, Axis::width);
  auto v = qkv.v.to_vector();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t r = 0; r < 3; ++r)
      CHECK(core.at({0, ch, r, 0}) ==
            doctest::Approx(v[ch * 3 + r] + p.rv.at({ch / dk, 0, ch % dk})).epsilon(1e-12));
  // Projected output equals W_out applied to the core output.
  p.w_out = random_tensor(p.w_out.shape(), rng);
  Tensor y = axial_attend(x, p, Axis::width);
  CHECK(max_abs_diff(y.to_vector(), project_oracle(core, p.w_out)) < 1e-12);
}

TEST_CASE("axial core matches the direct oracle on both axes") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t heads = 1 + rng.below(3), dk = 1 + rng.below(3), c = heads * dk;
    const std::size_t n = 1 + rng.below(2), h = 1 + rng.below(5), w = 1 + rng.below(5);
    const Axis axis = rng.bernoulli(0.5) ? Axis::width : Axis::height;
    const std::size_t len = axis == Axis::width ? w : h;
    // Tables sized for a longer axis must still index by offset from the centre.
    const std::size_t table = 2 * (len + rng.below(2)) - 1;
    Qkv qkv{random_tensor({n, c, h, w}, rng), random_tensor({n, c, h, w}, rng),
            random_tensor({n, c, h, w}, rng)};
    Tensor rq = random_tensor({heads, table, dk}, rng), rk = random_tensor({heads, table, dk}, rng),
           rv = random_tensor({heads, table, dk}, rng);
    Tensor y = axial_attention_core(qkv, rq, rk, rv, heads, axis);
    CHECK(max_abs_diff(y.to_vector(),
                       axial_oracle(qkv.q, qkv.k, qkv.v, rq, rk, rv, heads, axis)) < 1e-12);
  }
}

TEST_CASE("degenerate geometry: single row or column equals full attention") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const bool row = trial % 2 == 0;
    const std::size_t heads = 1 + rng.below(2), c = heads * (1 + rng.below(3));
    const std::size_t len = 1 + rng.below(8);
    const std::size_t h = row ? 1 : len, w = row ? len : 1;
    auto p = random_layer(c, heads, len, DType::f32, rng);
    zero_tables(p);
    Tensor x = random_tensor({1 + rng.below(2), c, h, w}, rng, DType::f32);
    Tensor axial = axial_attend(x, p, row ? Axis::width : Axis::height);
    Tensor full = full_attention_reference(x, p);
    CHECK(max_abs_diff(axial.to_vector(), full.to_vector()) < 1e-5);
  }
}

TEST_CASE("full attention reference") {
  Rng rng(6);
  SUBCASE("single token gives W_out V") {
    auto p = random_layer(4, 2, 1, DType::f64, rng);
    Tensor x = random_tensor({1, 4, 1, 1}, rng);
    auto v = qkv_project(x, p).v;
    CHECK(max_abs_diff(full_attention_reference(x, p).to_vector(), project_oracle(v, p.w_out)) <
          1e-12);
  }
  SUBCASE("two identical tokens output the mean of their values") {
    auto p = random_layer(4, 2, 2, DType::f64, rng);
    p.w_out = identity_kernel(4, DType::f64);
    Tensor x = Tensor::zeros({1, 4, 1, 2}, DType::f64);
    for (std::size_t ch = 0; ch < 4; ++ch) {
      const double value = rng.uniform(-1, 1);
      x.set({0, ch, 0, 0}, value);
      x.set({0, ch, 0, 1}, value);
    }
    auto v = qkv_project(x, p).v.to_vector();
    auto y = full_attention_reference(x, p).to_vector();
    for (std::size_t ch = 0; ch < 4; ++ch)
      for (std::size_t t = 0; t < 2; ++t)
        CHECK(y[ch * 2 + t] == doctest::Approx((v[ch * 2] + v[ch * 2 + 1]) / 2).epsilon(1e-12));
  }
  SUBCASE("random 1x8x3x3 matches a dense evaluation") {
    auto p = random_layer(8, 2, 3, DType::f64, rng);
    Tensor x = random_tensor({1, 8, 3, 3}, rng);
    CHECK(max_abs_diff(full_attention_reference(x, p).to_vector(), full_oracle(x, p)) < 1e-6);
  }
}

TEST_CASE("attention weights are row-stochastic including positional terms") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t heads = 1 + rng.below(3), c = heads * (1 + rng.below(4));
    const std::size_t h = 1 + rng.below(7), w = 1 + rng.below(7);
    const Axis axis = trial % 2 ? Axis::width : Axis::height;
    auto p = AttentionLayerParams::init(c, heads, std::max(h, w), DType::f32, rng);
    Tensor x = random_tensor({2, c, h, w}, rng, DType::f32, -3, 3);
    Tensor a = axial_attention_weights(qkv_project(x, p), p.rq, p.rk, heads, axis);
    const std::size_t len = a.shape().back();
    auto v = a.to_vector();
    for (std::size_t row = 0; row < v.size() / len; ++row) {
      double s = 0;
      for (std::size_t j = 0; j < len; ++j) {
        CHECK(v[row * len + j] >= 0.0);
        s += v[row * len + j];
      }
      CHECK(std::abs(s - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("content-only attention is permutation equivariant along the axis") {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t c = 4, h = 3, w = 2 + rng.below(6);
    auto p = random_layer(c, 2, w, DType::f64, rng);
    zero_tables(p);
    Tensor x = random_tensor({1, c, h, w}, rng);
    std::vector<std::size_t> perm(w);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    Tensor xp = Tensor::zeros(x.shape(), DType::f64);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t col = 0; col < w; ++col) xp.set({0, ch, r, col}, x.at({0, ch, r, perm[col]}));
    Tensor y = axial_attend(x, p, Axis::width), yp = axial_attend(xp, p, Axis::width);
    double worst = 0;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t col = 0; col < w; ++col)
          worst = std::max(worst, std::abs(yp.at({0, ch, r, col}) - y.at({0, ch, r, perm[col]})));
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("attention block with zero output projections is the identity, bit-exact") {
  Rng rng(9);
  for (std::size_t depth : {1u, 2u, 3u}) {
    auto params = AttentionBlockParams::init({depth, 2}, 4, 5, 6, DType::f32, rng);
    Tensor x = random_tensor({2, 4, 5, 6}, rng, DType::f32, -10, 10);
    Tensor y = attention_block(x, params);
    CHECK(y.shape() == x.shape());
    CHECK(y.to_vector() == x.to_vector());
  }
}

TEST_CASE("attention block output shape equals input shape") {
  Rng rng(10);
  for (std::size_t depth : {1u, 2u, 4u}) {
    auto params = AttentionBlockParams::init({depth, 4}, 8, 3, 7, DType::f32, rng);
    for (auto& layer : params.layers)
      for (auto* lp : {&layer.height, &layer.width})
        lp->w_out = random_tensor(lp->w_out.shape(), rng, DType::f32);
    Tensor x = random_tensor({1, 8, 3, 7}, rng, DType::f32);
    CHECK(attention_block(x, params).shape() == x.shape());
  }
}

TEST_CASE("depth-2 attention block passes the gradient check at 64-bit") {
  Rng rng(11);
  auto params = AttentionBlockParams::init({2, 2}, 4, 3, 4, DType::f64, rng);
  for (auto& layer : params.layers)
    for (auto* lp : {&layer.height, &layer.width})
      lp->w_out = random_tensor(lp->w_out.shape(), rng, DType::f64, -0.5, 0.5, true);
  Tensor x = random_tensor({1, 4, 3, 4}, rng, DType::f64, -1, 1, true);
  Tensor r = random_tensor({1, 4, 3, 4}, rng);
  std::vector<Tensor> leaves{x};
  for (auto& [name, t] : params.named_tensors("attn")) leaves.push_back(t);
  auto res = grad_check([&] { return ops::sum(ops::mul(attention_block(x, params), r)); },
                        leaves, {.eps = 1e-5});
  CHECK(res.coords_checked > 200);
  CHECK(res.max_rel_error < 1e-5);
}

TEST_CASE("axial core gradient check covers every input and both axes") {
  Rng rng(12);
  for (Axis axis : {Axis::height, Axis::width}) {
    const std::size_t heads = 2, c = 4;
    std::vector<Tensor> leaves{random_tensor({2, c, 3, 4}, rng, DType::f64, -1, 1, true),
                               random_tensor({2, c, 3, 4}, rng, DType::f64, -1, 1, true),
                               random_tensor({2, c, 3, 4}, rng, DType::f64, -1, 1, true),
                               random_tensor({heads, 9, 2}, rng, DType::f64, -1, 1, true),
                               random_tensor({heads, 9, 2}, rng, DType::f64, -1, 1, true),
                               random_tensor({heads, 9, 2}, rng, DType::f64, -1, 1, true)};
    Tensor r = random_tensor({2, c, 3, 4}, rng);
    auto loss = [&] {
      Qkv qkv{leaves[0], leaves[1], leaves[2]};
      return ops::sum(ops::mul(axial_attention_core(qkv, leaves[3], leaves[4], leaves[5], heads, axis), r));
    };
    auto res = grad_check(loss, leaves, {.eps = 1e-5});
    CHECK(res.max_rel_error < 1e-6);
    for (double e : res.per_param_max) CHECK(e < 1e-6);
  }
}

TEST_CASE("axial core is deterministic across thread counts") {
  Rng rng(13);
  auto params = AttentionBlockParams::init({2, 2}, 4, 6, 5, DType::f32, rng);
  for (auto& layer : params.layers)
    for (auto* lp : {&layer.height, &layer.width})
      lp->w_out = random_tensor(lp->w_out.shape(), rng, DType::f32, -0.5, 0.5, true);
  Tensor x = random_tensor({3, 4, 6, 5}, rng, DType::f32, -1, 1, true);
  auto run = [&](std::size_t threads) {
    set_kernel_threads(threads);
    for (auto& [name, t] : params.named_tensors("a")) t.zero_grad();
    x.zero_grad();
    Tensor y = attention_block(x, params);
    ops::sum(ops::mul(y, y)).backward();
    std::vector<double> out = y.to_vector();
    for (auto& [name, t] : params.named_tensors("a")) {
      auto g = t.grad().to_vector();
      out.insert(out.end(), g.begin(), g.end());
    }
    return out;
  };
  auto one = run(1), four = run(4);
  set_kernel_threads(1);
  CHECK(one == four);
}

TEST_CASE("configuration errors") {
  Rng rng(14);
  CHECK_THROWS_AS(AttentionLayerParams::init(6, 4, 5, DType::f32, rng), ConfigError);
  auto p = AttentionLayerParams::init(4, 2, 3, DType::f32, rng);
  CHECK(p.max_axis_len() == 3);
  Tensor x = random_tensor({1, 4, 2, 4}, rng, DType::f32);
  CHECK_NOTHROW(axial_attend(x, p, Axis::height));
  CHECK_THROWS_AS(axial_attend(x, p, Axis::width), ConfigError);
  CHECK_THROWS_AS(AttentionBlockParams::init({0, 2}, 4, 3, 3, DType::f32, rng), ConfigError);
}

TEST_CASE("flop formula examples") {
  for (std::size_t c : {8u, 64u}) {
    CHECK(count_attention_flops(16, 16, c, AttentionMode::full) ==
          16 * count_attention_flops(8, 8, c, AttentionMode::full));
    CHECK(count_attention_flops(16, 16, c, AttentionMode::axial) ==
          8 * count_attention_flops(8, 8, c, AttentionMode::axial));
    CHECK(count_attention_flops(32, 32, c, AttentionMode::full) ==
          16 * count_attention_flops(32, 32, c, AttentionMode::axial));
  }
}

TEST_CASE("flop formula matches instrumented kernel counters exactly") {
  Rng rng(15);
  for (auto [h, w, c, heads] : {std::array<std::size_t, 4>{4, 4, 8, 2},
                                std::array<std::size_t, 4>{5, 7, 6, 3},
                                std::array<std::size_t, 4>{8, 3, 4, 1}}) {
    auto layer = AttentionLayerParams::init(c, heads, std::max(h, w), DType::f32, rng);
    Tensor x = random_tensor({1, c, h, w}, rng, DType::f32);
    NoGradGuard no_grad;
    auto& k = kernel_counters();
    k.reset();
    axial_attend(x, layer, Axis::height);
    axial_attend(x, layer, Axis::width);
    CHECK(k.axial_score_macs + k.axial_aggregate_macs ==
          count_attention_flops(h, w, c, AttentionMode::axial));
    k.reset();
    full_attention_reference(x, layer);
    CHECK(k.matmul_macs == count_attention_flops(h, w, c, AttentionMode::full));
  }
}
