#include "waunet/network/waunet.hpp"

#include <cmath>

#include "waunet/tensor/ops.hpp"
#include "waunet/tensor/rng.hpp"

namespace waunet::net {

namespace {

using Named = std::vector<std::pair<std::string, Tensor>>;

constexpr double kHeadInitStd = 0.01;

std::string node_name(std::size_t i, std::size_t j) {
  return "x" + std::to_string(i) + "_" + std::to_string(j);
}

Tensor kaiming(const Shape& shape, std::size_t fan_in, DType dtype, std::uint64_t seed,
               const std::string& name) {
  Rng rng(mix_seed(seed, hash_name(name)));
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = stddev * rng.normal();
  return Tensor::from_values(shape, v, dtype, true);
}

Conv make_conv(std::size_t cin, std::size_t cout, std::size_t k, const NetConfig& cfg,
               std::uint64_t seed, const std::string& name) {
  return {kaiming({cout, cin, k, k}, cin * k * k, cfg.dtype, seed, name + ".weight"),
          Tensor::zeros({cout}, cfg.dtype, true)};
}

Conv make_up(std::size_t cin, std::size_t cout, const NetConfig& cfg, std::uint64_t seed,
             const std::string& name) {
  // Stride-2 2x2 kernels do not overlap: each output pixel sees one tap per
  // input channel.
  return {kaiming({cin, cout, 2, 2}, cin, cfg.dtype, seed, name + ".weight"),
          Tensor::zeros({cout}, cfg.dtype, true)};
}

CnnBlock make_cnn(std::size_t cin, std::size_t cout, const NetConfig& cfg, std::uint64_t seed,
                  const std::string& name) {
  CnnBlock b;
  for (std::size_t k = 0; k < 3; ++k)
    b.convs[k] = make_conv(k == 0 ? cin : cout, cout, 3, cfg, seed,
                           name + ".conv" + std::to_string(k));
  return b;
}

void add_conv(Named& out, const std::string& name, const Conv& c) {
  if (!c.weight.defined()) return;
  out.emplace_back(name + ".weight", c.weight);
  out.emplace_back(name + ".bias", c.bias);
}

void add_cnn(Named& out, const std::string& name, const CnnBlock& b) {
  for (std::size_t k = 0; k < 3; ++k) add_conv(out, name + ".conv" + std::to_string(k), b.convs[k]);
}

void add_node(Named& out, const std::string& name, const FusionNode& n) {
  add_conv(out, name + ".fuse", n.fuse);
  add_conv(out, name + ".up", n.up);
  add_cnn(out, name, n.cnn);
}

Tensor run_cnn(const CnnBlock& b, Tensor x) {
  for (const auto& c : b.convs) x = ops::relu(ops::conv2d(x, c.weight, c.bias, 1, 1));
  return x;
}

Tensor run_node(const FusionNode& n, std::vector<Tensor> maps, const Tensor& below) {
  if (below.defined()) maps.push_back(ops::deconv2d(below, n.up.weight, n.up.bias));
  return run_cnn(n.cnn, fuse(maps, n.fuse));
}

}  // namespace

void NetConfig::validate() const {
  auto fail = [](const std::string& why) { throw ConfigError("network config: " + why); };
  if (levels == 0) fail("levels must be >= 1");
  if (filters.size() != levels)
    fail("filters has " + std::to_string(filters.size()) + " entries for " +
         std::to_string(levels) + " levels");
  if (attention_depths.size() != levels)
    fail("attention_depths has " + std::to_string(attention_depths.size()) + " entries for " +
         std::to_string(levels) + " levels");
  if (num_classes < 2 || num_classes > 256) fail("num_classes must be in [2, 256]");
  if (input_channels == 0) fail("input_channels must be >= 1");
  if (heads == 0) fail("heads must be >= 1");
  if (input_size == 0 || levels > 63 || input_size % (std::size_t{1} << (levels - 1)) != 0)
    fail("input_size " + std::to_string(input_size) + " is not divisible by 2^(levels-1)");
  for (std::size_t i = 0; i < levels; ++i) {
    if (filters[i] == 0) fail("filters must be positive");
    if (!attention) continue;
    if (attention_depths[i] == 0) fail("attention depth must be >= 1");
    if (filters[i] % heads)
      fail("filters[" + std::to_string(i) + "]=" + std::to_string(filters[i]) +
           " is not divisible by heads=" + std::to_string(heads));
  }
}

NetworkGraph build_waunet(const NetConfig& config, std::uint64_t seed) {
  config.validate();
  NetworkGraph g;
  g.config = config;
  const std::size_t L = config.levels;
  const auto& f = config.filters;
  for (std::size_t i = 0; i < L; ++i)
    g.encoder.push_back(make_cnn(i == 0 ? config.input_channels : f[i - 1], f[i], config, seed,
                                 node_name(i, 0)));
  g.nested.resize(L);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 1; i + j <= L - 1; ++j) {
      const std::string name = node_name(i, j);
      FusionNode n;
      n.fuse = make_conv((j + 1) * f[i], f[i], 1, config, seed, name + ".fuse");
      n.up = make_up(f[i + 1], f[i], config, seed, name + ".up");
      n.cnn = make_cnn(f[i], f[i], config, seed, name);
      g.nested[i].push_back(std::move(n));
    }
  if (config.attention)
    for (std::size_t i = 0; i < L; ++i) {
      const std::string name = "attn" + std::to_string(i);
      Rng rng(mix_seed(seed, hash_name(name)));
      const std::size_t s = config.level_size(i);
      g.attention.push_back(attn::AttentionBlockParams::init(
          {config.attention_depths[i], config.heads}, f[i], s, s, config.dtype, rng));
    }
  for (std::size_t i = 0; i + 1 < L; ++i) {
    const std::string name = "dec" + std::to_string(i);
    FusionNode n;
    // Same-level nodes X^{i,0..L-2-i}, the attended node and the up-sampled decoder below.
    n.fuse = make_conv((L - i + 1) * f[i], f[i], 1, config, seed, name + ".fuse");
    n.up = make_up(f[i + 1], f[i], config, seed, name + ".up");
    n.cnn = make_cnn(f[i], f[i], config, seed, name);
    g.decoder.push_back(std::move(n));
  }
  // A near-zero head keeps the initial class posterior close to uniform
  // while still passing gradient to everything below on the first step.
  {
    Rng rng(mix_seed(seed, hash_name("head.weight")));
    std::vector<double> v(config.num_classes * f[0]);
    for (auto& x : v) x = kHeadInitStd * rng.normal();
    g.head = {Tensor::from_values({config.num_classes, f[0], 1, 1}, v, config.dtype, true),
              Tensor::zeros({config.num_classes}, config.dtype, true)};
  }
  return g;
}

std::vector<std::pair<std::string, Tensor>> NetworkGraph::named_parameters() const {
  Named out;
  for (std::size_t i = 0; i < encoder.size(); ++i) add_cnn(out, node_name(i, 0), encoder[i]);
  for (std::size_t i = 0; i < nested.size(); ++i)
    for (std::size_t j = 0; j < nested[i].size(); ++j) add_node(out, node_name(i, j + 1), nested[i][j]);
  for (std::size_t i = 0; i < attention.size(); ++i)
    for (auto& nt : attention[i].named_tensors("attn" + std::to_string(i))) out.push_back(nt);
  for (std::size_t i = 0; i < decoder.size(); ++i) add_node(out, "dec" + std::to_string(i), decoder[i]);
  add_conv(out, "head", head);
  return out;
}

std::vector<Tensor> NetworkGraph::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::size_t NetworkGraph::parameter_count() const {
  std::size_t n = 0;
  for (auto& [name, t] : named_parameters()) n += t.numel();
  return n;
}

Tensor NetworkGraph::parameter(const std::string& name) const {
  for (auto& [n, t] : named_parameters())
    if (n == name) return t;
  throw UsageError("network has no parameter named '" + name + "'");
}

std::vector<Edge> NetworkGraph::topology() const {
  using K = Edge::Kind;
  std::vector<Edge> e;
  const std::size_t L = config.levels;
  for (std::size_t i = 1; i < L; ++i) e.push_back({node_name(i - 1, 0), node_name(i, 0), K::down});
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 1; i + j <= L - 1; ++j) {
      for (std::size_t s = 0; s < j; ++s) e.push_back({node_name(i, s), node_name(i, j), K::skip});
      e.push_back({node_name(i + 1, j - 1), node_name(i, j), K::up});
    }
  for (std::size_t i = 0; i < L; ++i) {
    const std::string bridge = config.attention ? "attn" + std::to_string(i) : node_name(i, L - 1 - i);
    if (config.attention) e.push_back({node_name(i, L - 1 - i), bridge, K::attention});
    if (i + 1 == L) continue;
    const std::string dec = "dec" + std::to_string(i);
    for (std::size_t s = 0; s + 1 < L - i; ++s) e.push_back({node_name(i, s), dec, K::skip});
    e.push_back({bridge, dec, K::skip});
    const std::string below =
        i + 2 == L ? (config.attention ? "attn" + std::to_string(L - 1) : node_name(L - 1, 0))
                   : "dec" + std::to_string(i + 1);
    e.push_back({below, dec, K::up});
  }
  const std::string top = L == 1 ? (config.attention ? "attn0" : node_name(0, 0)) : "dec0";
  e.push_back({top, "head", K::head});
  return e;
}

Tensor fuse(std::span<const Tensor> maps, const Conv& conv) {
  if (maps.empty()) throw DimensionError("fuse: no feature maps");
  for (const auto& m : maps)
    if (m.rank() != 4 || m.dim(0) != maps[0].dim(0) || m.dim(2) != maps[0].dim(2) ||
        m.dim(3) != maps[0].dim(3))
      throw DimensionError("fuse: feature map " + shape_str(m.shape()) + " does not match " +
                           shape_str(maps[0].shape()));
  Tensor x = maps.size() == 1 ? maps[0] : ops::concat(maps, 1);
  return ops::conv2d(x, conv.weight, conv.bias);
}

Tensor forward(const NetworkGraph& g, const Tensor& images) {
  const NetConfig& cfg = g.config;
  if (images.rank() != 4 || images.dim(1) != cfg.input_channels ||
      images.dim(2) != cfg.input_size || images.dim(3) != cfg.input_size)
    throw DimensionError("forward: expected [N," + std::to_string(cfg.input_channels) + "," +
                         std::to_string(cfg.input_size) + "," + std::to_string(cfg.input_size) +
                         "] images, got " + shape_str(images.shape()));
  if (images.dtype() != cfg.dtype)
    throw UsageError("forward: images are " + std::string(dtype_name(images.dtype())) +
                     ", network is " + std::string(dtype_name(cfg.dtype)));
  const std::size_t L = cfg.levels;
  std::vector<std::vector<Tensor>> x(L);
  for (std::size_t i = 0; i < L; ++i)
    x[i].push_back(run_cnn(g.encoder[i], i == 0 ? images : ops::maxpool2d(x[i - 1][0])));
  for (std::size_t j = 1; j < L; ++j)
    for (std::size_t i = 0; i + j <= L - 1; ++i)
      x[i].push_back(run_node(g.nested[i][j - 1], x[i], x[i + 1][j - 1]));
  std::vector<Tensor> bridge(L);
  for (std::size_t i = 0; i < L; ++i) {
    const Tensor& last = x[i][L - 1 - i];
    bridge[i] = cfg.attention ? attn::attention_block(last, g.attention[i]) : last;
  }
  Tensor d = bridge[L - 1];
  for (std::size_t i = L - 1; i-- > 0;) {
    std::vector<Tensor> maps(x[i].begin(), x[i].end() - 1);
    maps.push_back(bridge[i]);
    d = run_node(g.decoder[i], std::move(maps), d);
  }
  return ops::conv2d(d, g.head.weight, g.head.bias);
}

LabelMap predict_labels(const Tensor& logits, Spacing spacing) {
  if (logits.rank() != 4 || logits.dim(1) < 2)
    throw DimensionError("predict_labels: expected [N,K,H,W] with K >= 2, got " +
                         shape_str(logits.shape()));
  const std::size_t n = logits.dim(0), k = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  if (k > 256) throw DimensionError("predict_labels: more than 256 classes");
  std::vector<std::uint8_t> ids(n * h * w);
  dispatch(logits.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto v = logits.data<T>();
    const std::size_t plane = h * w;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t p = 0; p < plane; ++p) {
        std::size_t best = 0;
        T best_v = v[b * k * plane + p];
        for (std::size_t c = 1; c < k; ++c) {
          const T cand = v[(b * k + c) * plane + p];
          if (cand > best_v) {
            best_v = cand;
            best = c;
          }
        }
        ids[b * plane + p] = static_cast<std::uint8_t>(best);
      }
  });
  return LabelMap(n, h, w, std::move(ids), spacing);
}

}  // namespace waunet::net
