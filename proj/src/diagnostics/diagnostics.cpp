#include "waunet/diagnostics/diagnostics.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <sstream>

#include "waunet/tensor/errors.hpp"
#include "waunet/tensor/grad_check.hpp"
#include "waunet/tensor/ops.hpp"
#include "waunet/tensor/parallel.hpp"

namespace waunet::diag {

namespace {

Tensor uniform(const Shape& shape, Rng& rng, bool leaf = true, double lo = -1, double hi = 1) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_values(shape, v, DType::f64, leaf);
}

struct Case {
  std::vector<Tensor> leaves;
  std::vector<std::string> names;
  std::function<Tensor()> loss;
};

Case primitive_case(OpKind kind, Rng& rng) {
  Case c;
  auto leaf = [&](const std::string& name, const Shape& s) {
    c.leaves.push_back(uniform(s, rng));
    c.names.push_back(name);
    return c.leaves.back();
  };
  switch (kind) {
    case OpKind::conv2d: {
      Tensor x = leaf("input", {2, 3, 5, 5}), w = leaf("weight", {4, 3, 3, 3}), b = leaf("bias", {4});
      Tensor r = uniform({2, 4, 5, 5}, rng, false);
      c.loss = [=] { return ops::sum(ops::mul(ops::conv2d(x, w, b, 1, 1), r)); };
      break;
    }
    case OpKind::deconv2d: {
      Tensor x = leaf("input", {2, 3, 3, 3}), w = leaf("weight", {3, 2, 2, 2}), b = leaf("bias", {2});
      Tensor r = uniform({2, 2, 6, 6}, rng, false);
      c.loss = [=] { return ops::sum(ops::mul(ops::deconv2d(x, w, b), r)); };
      break;
    }
    case OpKind::maxpool2d: {
      Tensor x = leaf("input", {2, 2, 6, 6});
      Tensor r = uniform({2, 2, 3, 3}, rng, false);
      c.loss = [=] { return ops::sum(ops::mul(ops::maxpool2d(x), r)); };
      break;
    }
    case OpKind::relu: {
      Tensor x = leaf("input", {3, 7});
      Tensor r = uniform({3, 7}, rng, false);
      c.loss = [=] { return ops::sum(ops::mul(ops::relu(x), r)); };
      break;
    }
    case OpKind::softmax: {
      Tensor x = leaf("input", {2, 3, 4});
      Tensor r = uniform({2, 3, 4}, rng, false);
      c.loss = [=] { return ops::sum(ops::mul(ops::softmax(x, 1), r)); };
      break;
    }
    case OpKind::cross_entropy: {
      Tensor x = leaf("logits", {2, 4, 3, 3});
      std::vector<std::uint8_t> ids(18);
      for (auto& id : ids) id = static_cast<std::uint8_t>(rng.below(4));
      LabelMap y(2, 3, 3, ids);
      c.loss = [=] { return ops::cross_entropy_loss(x, y); };
      break;
    }
    case OpKind::matmul: {
      Tensor a = leaf("a", {2, 3, 4}), b = leaf("b", {2, 4, 5});
      Tensor r = uniform({2, 3, 5}, rng, false);
      c.loss = [=] { return ops::sum(ops::mul(ops::matmul(a, b), r)); };
      break;
    }
    case OpKind::concat: {
      Tensor a = leaf("a", {2, 2, 3}), b = leaf("b", {2, 3, 3});
      Tensor r = uniform({2, 5, 3}, rng, false);
      c.loss = [=] { return ops::sum(ops::mul(ops::concat({a, b}, 1), r)); };
      break;
    }
    case OpKind::add: {
      Tensor a = leaf("a", {3, 4}), b = leaf("b", {3, 4});
      Tensor r = uniform({3, 4}, rng, false);
      c.loss = [=] { return ops::sum(ops::mul(ops::add(a, b), r)); };
      break;
    }
    case OpKind::mul: {
      Tensor a = leaf("a", {3, 4}), b = leaf("b", {3, 4});
      c.loss = [=] { return ops::sum(ops::mul(a, b)); };
      break;
    }
    case OpKind::scale: {
      Tensor x = leaf("input", {3, 4});
      Tensor r = uniform({3, 4}, rng, false);
      c.loss = [=] { return ops::sum(ops::mul(ops::scale(x, -1.7), r)); };
      break;
    }
    case OpKind::permute: {
      Tensor x = leaf("input", {2, 3, 4});
      Tensor r = uniform({4, 2, 3}, rng, false);
      c.loss = [=] { return ops::sum(ops::mul(ops::permute(x, {2, 0, 1}), r)); };
      break;
    }
    case OpKind::reshape: {
      Tensor x = leaf("input", {2, 3, 4});
      Tensor r = uniform({6, 4}, rng, false);
      c.loss = [=] { return ops::sum(ops::mul(ops::reshape(x, {6, 4}), r)); };
      break;
    }
    case OpKind::sum: {
      Tensor x = leaf("input", {3, 4});
      c.loss = [=] {
        Tensor s = ops::sum(x);
        return ops::mul(s, s);
      };
      break;
    }
    case OpKind::mean: {
      Tensor x = leaf("input", {3, 4});
      c.loss = [=] {
        Tensor m = ops::mean(x);
        return ops::mul(m, m);
      };
      break;
    }
    case OpKind::axial_attention: {
      const std::size_t heads = 2;
      Tensor q = leaf("q", {2, 4, 3, 4}), k = leaf("k", {2, 4, 3, 4}), v = leaf("v", {2, 4, 3, 4});
      Tensor rq = leaf("rq", {heads, 7, 2}), rk = leaf("rk", {heads, 7, 2}), rv = leaf("rv", {heads, 7, 2});
      Tensor r1 = uniform({2, 4, 3, 4}, rng, false), r2 = uniform({2, 4, 3, 4}, rng, false);
      c.loss = [=] {
        attn::Qkv qkv{q, k, v};
        return ops::add(
            ops::sum(ops::mul(attn::axial_attention_core(qkv, rq, rk, rv, heads, attn::Axis::height), r1)),
            ops::sum(ops::mul(attn::axial_attention_core(qkv, rq, rk, rv, heads, attn::Axis::width), r2)));
      };
      break;
    }
  }
  return c;
}

LayerCheck run_check(const std::string& name, Case& c, const GradCheckOptions& opts, double threshold) {
  auto res = grad_check(c.loss, c.leaves, opts);
  LayerCheck out;
  out.name = name;
  out.max_rel_error = res.max_rel_error;
  out.threshold = threshold;
  out.coords = res.coords_checked;
  out.kink_coords = res.kink_coords;
  if (res.worst_param < c.names.size()) out.worst_param = c.names[res.worst_param];
  return out;
}

template <class F>
double best_time(F&& f, const BenchOptions& o) {
  double best = INFINITY;
  for (std::size_t r = 0; r < o.repeats; ++r) {
    std::size_t loops = 0;
    const auto t0 = std::chrono::steady_clock::now();
    double elapsed = 0;
    do {
      f();
      ++loops;
      elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    } while (elapsed < o.min_seconds);
    best = std::min(best, elapsed / double(loops));
  }
  return best;
}

}  // namespace

std::vector<LayerCheck> primitive_grad_checks(double eps, double threshold, std::uint64_t seed) {
  std::vector<LayerCheck> out;
  for (OpKind kind : all_op_kinds()) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(kind)));
    Case c = primitive_case(kind, rng);
    out.push_back(run_check(std::string(op_name(kind)), c, {.eps = eps, .max_coords = 0, .seed = seed},
                            threshold));
  }
  return out;
}

LayerCheck network_grad_check(net::NetConfig config, std::size_t coords, double eps,
                              double threshold, std::uint64_t seed) {
  config.dtype = DType::f64;
  auto g = net::build_waunet(config, seed);
  Rng rng(mix_seed(seed, hash_name("gradcheck")));
  Case c;
  for (auto& [name, t] : g.named_parameters()) {
    if (name.ends_with(".w_out") || name.starts_with("head")) {
      Tensor h = t;
      for (auto& v : h.data<double>()) v = 0.3 * rng.uniform(-1, 1);
    }
    c.leaves.push_back(t);
    c.names.push_back(name);
  }
  const std::size_t s = config.input_size, n = 1;
  Tensor x = uniform({n, config.input_channels, s, s}, rng, false, 0, 1);
  std::vector<std::uint8_t> ids(n * s * s);
  for (auto& id : ids) id = static_cast<std::uint8_t>(rng.below(config.num_classes));
  LabelMap y(n, s, s, ids);
  c.loss = [&] { return ops::cross_entropy_loss(net::forward(g, x), y); };
  return run_check("network", c, {.eps = eps, .max_coords = coords, .seed = seed}, threshold);
}

std::vector<BenchRow> run_attention_bench(const BenchOptions& o) {
  if (o.heads == 0 || o.channels % o.heads)
    throw ConfigError("bench: channels must be a positive multiple of heads");
  NoGradGuard no_grad;
  Rng rng(o.seed);
  const std::size_t dk = o.channels / o.heads;
  auto& counters = kernel_counters();
  std::vector<BenchRow> rows;
  for (std::size_t s : o.sizes) {
    const std::size_t t = s * s;
    auto rand = [&](const Shape& sh) { return uniform(sh, rng, false); };
    attn::Qkv qkv{rand({o.batch, o.channels, s, s}), rand({o.batch, o.channels, s, s}),
                  rand({o.batch, o.channels, s, s})};
    Tensor rq = rand({o.heads, 2 * s - 1, dk}), rk = rand({o.heads, 2 * s - 1, dk}),
           rv = rand({o.heads, 2 * s - 1, dk});
    auto axial = [&] {
      attn::axial_attention_core(qkv, rq, rk, rv, o.heads, attn::Axis::height);
      attn::axial_attention_core(qkv, rq, rk, rv, o.heads, attn::Axis::width);
    };
    BenchRow a{attn::AttentionMode::axial, s, t,
               o.batch * attn::count_attention_flops(s, s, o.channels, attn::AttentionMode::axial)};
    counters.reset();
    axial();
    a.counted = counters.axial_score_macs + counters.axial_aggregate_macs;
    a.seconds = best_time(axial, o);
    rows.push_back(a);

    if (s > o.full_max_size) continue;
    // [N, C, S, S] -> [N*heads, tokens, dk]
    auto tokens = [&](const Tensor& x) {
      return ops::reshape(ops::permute(ops::reshape(x, {o.batch, o.heads, dk, t}), {0, 1, 3, 2}),
                          {o.batch * o.heads, t, dk});
    };
    Tensor q = tokens(qkv.q), kt = ops::permute(tokens(qkv.k), {0, 2, 1}), v = tokens(qkv.v);
    const double inv = 1.0 / std::sqrt(double(dk));
    auto full = [&] { ops::matmul(ops::softmax(ops::scale(ops::matmul(q, kt), inv), 2), v); };
    BenchRow f{attn::AttentionMode::full, s, t,
               o.batch * attn::count_attention_flops(s, s, o.channels, attn::AttentionMode::full)};
    counters.reset();
    full();
    f.counted = counters.matmul_macs;
    f.seconds = best_time(full, o);
    rows.push_back(f);
  }
  return rows;
}

double fitted_slope(const std::vector<BenchRow>& rows, attn::AttentionMode mode) {
  std::vector<double> x, y;
  for (const auto& r : rows)
    if (r.mode == mode) {
      x.push_back(std::log(double(r.tokens)));
      y.push_back(std::log(r.seconds));
    }
  if (x.size() < 2) throw UsageError("fitted_slope: need at least two sizes");
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / double(x.size());
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / double(y.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxy / sxx;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream out;
  out << "mode,size,tokens,flops,counted_macs,seconds\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.9g", r.seconds);
    out << (r.mode == attn::AttentionMode::axial ? "axial" : "full") << "," << r.size << ","
        << r.tokens << "," << r.flops << "," << r.counted << "," << buf << "\n";
  }
  return out.str();
}

}  // namespace waunet::diag
