#include "waunet/phantom/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "waunet/tensor/errors.hpp"

namespace waunet::phantom {

namespace {

OrganRecipe recipe(std::string name, ShapeFamily family, double row, double col, double jitter,
                   std::pair<double, double> rr, std::pair<double, double> rc, double contrast,
                   std::pair<double, double> area) {
  OrganRecipe r;
  r.name = std::move(name);
  r.family = family;
  r.center_row = row;
  r.center_col = col;
  r.jitter = jitter;
  r.radius_row[0] = rr.first;
  r.radius_row[1] = rr.second;
  r.radius_col[0] = rc.first;
  r.radius_col[1] = rc.second;
  r.contrast = contrast;
  r.area_fraction[0] = area.first;
  r.area_fraction[1] = area.second;
  return r;
}

std::vector<OrganRecipe> build_defaults() {
  using F = ShapeFamily;
  std::vector<OrganRecipe> v;
  v.push_back(recipe("brainstem", F::ellipse, 0.55, 0.5, 0.03, {0.09, 0.12}, {0.07, 0.10}, 0.25,
                     {0.012, 0.05}));
  auto mandible = recipe("mandible", F::ring, 0.5, 0.5, 0.02, {0.38, 0.44}, {0.36, 0.42}, 0.6,
                         {0.03, 0.2});
  mandible.thickness[0] = 0.06;
  mandible.thickness[1] = 0.09;
  v.push_back(mandible);
  auto parotid = recipe("parotid", F::paired, 0.42, 0.5, 0.02, {0.07, 0.10}, {0.04, 0.06}, -0.12,
                        {0.012, 0.045});
  parotid.lateral[0] = 0.26;
  parotid.lateral[1] = 0.30;
  v.push_back(parotid);
  v.push_back(recipe("chiasm", F::ellipse, 0.32, 0.5, 0.02, {0.035, 0.05}, {0.07, 0.09}, 0.08,
                     {0.005, 0.02}));
  v.push_back(recipe("spinal_cord", F::strip, 0.76, 0.5, 0.01, {0.035, 0.05}, {0.02, 0.03}, 0.35,
                     {0.002, 0.012}));
  auto nerve = recipe("optic_nerve", F::paired, 0.25, 0.5, 0.01, {0.015, 0.025}, {0.03, 0.04},
                      0.07, {0.001, 0.01});
  nerve.lateral[0] = 0.15;
  nerve.lateral[1] = 0.17;
  v.push_back(nerve);
  auto eye = recipe("eye", F::paired, 0.14, 0.5, 0.01, {0.05, 0.07}, {0.05, 0.07}, 0.2,
                    {0.01, 0.04});
  eye.lateral[0] = 0.2;
  eye.lateral[1] = 0.22;
  v.push_back(eye);
  v.push_back(recipe("larynx", F::ellipse, 0.66, 0.5, 0.01, {0.025, 0.035}, {0.04, 0.06}, -0.2,
                     {0.002, 0.01}));
  v.push_back(recipe("oesophagus", F::strip, 0.5, 0.12, 0.01, {0.06, 0.09}, {0.015, 0.025}, 0.15,
                     {0.002, 0.012}));
  auto cochlea = recipe("cochlea", F::paired, 0.48, 0.5, 0.01, {0.02, 0.03}, {0.02, 0.03}, 0.45,
                        {0.001, 0.008});
  cochlea.lateral[0] = 0.16;
  cochlea.lateral[1] = 0.18;
  v.push_back(cochlea);
  return v;
}

bool in_ellipse(double y, double x, double cy, double cx, double ry, double rx) {
  const double a = (y - cy) / ry, b = (x - cx) / rx;
  return a * a + b * b <= 1.0;
}

// Rasterizes one drawn instance of a recipe by pixel-centre membership.
std::vector<bool> draw(const OrganRecipe& r, std::size_t size, Rng& rng) {
  const double s = double(size);
  const double cy = (r.center_row + rng.uniform(-r.jitter, r.jitter)) * s;
  const double cx = (r.center_col + rng.uniform(-r.jitter, r.jitter)) * s;
  const double ry = rng.uniform(r.radius_row[0], r.radius_row[1]) * s;
  const double rx = rng.uniform(r.radius_col[0], r.radius_col[1]) * s;
  const double lateral = rng.uniform(r.lateral[0], r.lateral[1]) * s;
  const double band = rng.uniform(r.thickness[0], r.thickness[1]) * s;
  std::vector<bool> m(size * size, false);
  for (std::size_t row = 0; row < size; ++row)
    for (std::size_t col = 0; col < size; ++col) {
      const double y = row + 0.5, x = col + 0.5;
      bool in = false;
      switch (r.family) {
        case ShapeFamily::ellipse:
          in = in_ellipse(y, x, cy, cx, ry, rx);
          break;
        case ShapeFamily::paired:
          in = in_ellipse(y, x, cy, cx - lateral, ry, rx) || in_ellipse(y, x, cy, cx + lateral, ry, rx);
          break;
        case ShapeFamily::strip:
          in = std::abs(y - cy) <= ry && std::abs(x - cx) <= rx;
          break;
        case ShapeFamily::ring:
          // Lower arc of an elliptical band.
          in = in_ellipse(y, x, cy, cx, ry, rx) && !in_ellipse(y, x, cy, cx, ry - band, rx - band) &&
               y - cy >= 0.25 * ry;
          break;
      }
      m[row * size + col] = in;
    }
  return m;
}

}  // namespace

const std::vector<OrganRecipe>& default_recipes() {
  static const std::vector<OrganRecipe> recipes = build_defaults();
  return recipes;
}

std::vector<OrganRecipe> PhantomSpec::resolved_recipes() const {
  if (!recipes.empty()) {
    if (recipes.size() != num_organs)
      throw ConfigError("phantom: " + std::to_string(recipes.size()) + " recipes for " +
                        std::to_string(num_organs) + " organs");
    return recipes;
  }
  const auto& d = default_recipes();
  if (num_organs == 0 || num_organs > d.size())
    throw ConfigError("phantom: num_organs must be in [1, " + std::to_string(d.size()) + "]");
  return {d.begin(), d.begin() + static_cast<std::ptrdiff_t>(num_organs)};
}

std::pair<std::size_t, std::size_t> PhantomSpec::pixel_range(std::size_t k) const {
  const auto r = resolved_recipes().at(k - 1);
  const double px = double(size) * double(size);
  const auto lo = static_cast<std::size_t>(std::ceil(r.area_fraction[0] * px));
  const auto hi = static_cast<std::size_t>(std::floor(r.area_fraction[1] * px));
  return {std::max<std::size_t>(1, lo), hi};
}

Phantom generate_phantom(const PhantomSpec& spec) {
  if (spec.size == 0) throw ConfigError("phantom: size must be positive");
  if (!(spec.noise_std >= 0.0)) throw ConfigError("phantom: noise_std must be >= 0");
  const auto recipes = spec.resolved_recipes();
  const std::size_t n = spec.size * spec.size;
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (std::size_t k = 1; k <= recipes.size(); ++k) ranges.push_back(spec.pixel_range(k));
  Rng rng(spec.seed);
  for (std::size_t attempt = 0; attempt < spec.max_attempts; ++attempt) {
    std::vector<std::uint8_t> ids(n, 0);
    bool ok = true;
    for (std::size_t k = 0; k < recipes.size() && ok; ++k) {
      auto m = draw(recipes[k], spec.size, rng);
      std::size_t count = 0;
      for (std::size_t i = 0; i < n && ok; ++i) {
        if (!m[i]) continue;
        if (ids[i]) ok = false;
        ids[i] = static_cast<std::uint8_t>(k + 1);
        ++count;
      }
      ok = ok && count >= ranges[k].first && count <= ranges[k].second;
    }
    if (!ok) continue;
    std::vector<double> px(n);
    for (std::size_t i = 0; i < n; ++i) {
      double v = spec.background + (ids[i] ? recipes[ids[i] - 1].contrast : 0.0);
      if (spec.noise_std > 0) v += spec.noise_std * rng.normal();
      px[i] = std::clamp(v, 0.0, 1.0);
    }
    return {Tensor::from_values({1, spec.size, spec.size}, px, DType::f32),
            LabelMap(1, spec.size, spec.size, std::move(ids))};
  }
  throw GenerationError("phantom: no valid layout for " + std::to_string(recipes.size()) +
                        " organs at size " + std::to_string(spec.size) + " after " +
                        std::to_string(spec.max_attempts) + " attempts (seed " +
                        std::to_string(spec.seed) + ")");
}

Phantom center_crop(const Phantom& p, std::size_t target) {
  const std::size_t h = p.labels.height(), w = p.labels.width();
  if (target == 0 || target > h || target > w)
    throw DimensionError("center_crop: target " + std::to_string(target) + " exceeds " +
                         std::to_string(h) + "x" + std::to_string(w));
  const std::size_t r0 = (h - target) / 2, c0 = (w - target) / 2;
  const std::size_t ch = p.image.dim(0);
  auto src = p.image.to_vector();
  std::vector<double> img(ch * target * target);
  std::vector<std::uint8_t> ids(target * target);
  for (std::size_t r = 0; r < target; ++r)
    for (std::size_t c = 0; c < target; ++c) {
      for (std::size_t k = 0; k < ch; ++k)
        img[(k * target + r) * target + c] = src[(k * h + r + r0) * w + c + c0];
      ids[r * target + c] = p.labels.at(r + r0, c + c0);
    }
  return {Tensor::from_values({ch, target, target}, img, p.image.dtype()),
          LabelMap(1, target, target, std::move(ids), p.labels.spacing())};
}

AugmentParams AugmentParams::for_size(std::size_t size, std::uint64_t seed) {
  AugmentParams a;
  a.max_shift = 0.1 * double(size);
  a.seed = seed;
  return a;
}

Transform sample_transform(const AugmentParams& params, Rng& rng) {
  Transform t;
  const auto shift = static_cast<long>(std::floor(params.max_shift));
  t.dy = shift > 0 ? rng.between(-shift, shift) : 0;
  t.dx = shift > 0 ? rng.between(-shift, shift) : 0;
  t.angle_deg = params.max_rotation > 0 ? rng.uniform(-params.max_rotation, params.max_rotation) : 0;
  t.flip_h = params.flip_h && rng.bernoulli(params.flip_probability);
  t.flip_v = params.flip_v && rng.bernoulli(params.flip_probability);
  return t;
}

Phantom apply_transform(const Phantom& p, const Transform& t) {
  const std::size_t h = p.labels.height(), w = p.labels.width(), ch = p.image.dim(0);
  const auto src = p.image.to_vector();
  std::vector<double> img(ch * h * w, 0.0);
  std::vector<std::uint8_t> ids(h * w, 0);
  const double cy = (double(h) - 1) / 2, cx = (double(w) - 1) / 2;
  const double th = t.angle_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(th), sn = std::sin(th);
  auto unflip = [&](long r, long c) {
    return std::pair<long, long>{t.flip_v ? long(h) - 1 - r : r, t.flip_h ? long(w) - 1 - c : c};
  };
  auto inside = [&](long r, long c) { return r >= 0 && c >= 0 && r < long(h) && c < long(w); };
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      // Undo the shift, then the rotation; flips act on the integer grid.
      const double y = double(r) - double(t.dy), x = double(c) - double(t.dx);
      const double sy = cy + (y - cy) * cs + (x - cx) * sn;
      const double sx = cx - (y - cy) * sn + (x - cx) * cs;
      if (t.angle_deg == 0.0) {
        const long yi = long(r) - t.dy, xi = long(c) - t.dx;
        if (!inside(yi, xi)) continue;
        auto [fr, fc] = unflip(yi, xi);
        ids[r * w + c] = p.labels.at(fr, fc);
        for (std::size_t k = 0; k < ch; ++k) img[(k * h + r) * w + c] = src[(k * h + fr) * w + fc];
        continue;
      }
      const long nr = std::lround(sy), nc = std::lround(sx);
      if (inside(nr, nc)) {
        auto [fr, fc] = unflip(nr, nc);
        ids[r * w + c] = p.labels.at(fr, fc);
      }
      const long r0 = long(std::floor(sy)), c0 = long(std::floor(sx));
      const double fy = sy - r0, fx = sx - c0;
      for (std::size_t k = 0; k < ch; ++k) {
        double acc = 0;
        for (int dr = 0; dr < 2; ++dr)
          for (int dc = 0; dc < 2; ++dc) {
            if (!inside(r0 + dr, c0 + dc)) continue;
            auto [fr, fc] = unflip(r0 + dr, c0 + dc);
            acc += (dr ? fy : 1 - fy) * (dc ? fx : 1 - fx) * src[(k * h + fr) * w + fc];
          }
        img[(k * h + r) * w + c] = acc;
      }
    }
  return {Tensor::from_values(p.image.shape(), img, p.image.dtype()),
          LabelMap(1, h, w, std::move(ids), p.labels.spacing())};
}

Phantom augment(const Phantom& p, const AugmentParams& params) {
  Rng rng(params.seed);
  return apply_transform(p, sample_transform(params, rng));
}

}  // namespace waunet::phantom
