#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "waunet/metrics/metrics.hpp"
#include "waunet/tensor/rng.hpp"

using namespace waunet;
using namespace waunet::metrics;

namespace {

LabelMap mask_from(std::size_t h, std::size_t w, std::initializer_list<std::pair<int, int>> on,
                   Spacing s = {}) {
  LabelMap m(h, w, s);
  std::vector<std::uint8_t> ids(h * w, 0);
  for (auto [r, c] : on) ids[r * w + c] = 1;
  return LabelMap(1, h, w, ids, s);
}

// Union of random rectangles and ellipses, plus scattered pixels.
LabelMap random_mask(std::size_t h, std::size_t w, Rng& rng, Spacing s, std::size_t margin = 0) {
  std::vector<std::uint8_t> ids(h * w, 0);
  const int shapes = 1 + static_cast<int>(rng.below(3));
  for (int k = 0; k < shapes; ++k) {
    const double cr = rng.uniform(0, h), cc = rng.uniform(0, w);
    const double rr = rng.uniform(0.5, h / 3.0 + 1), rc = rng.uniform(0.5, w / 3.0 + 1);
    const bool ellipse = rng.bernoulli(0.5);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        const double dr = (r - cr) / rr, dc = (c - cc) / rc;
        if (ellipse ? dr * dr + dc * dc <= 1 : std::abs(dr) <= 1 && std::abs(dc) <= 1)
          ids[r * w + c] = 1;
      }
  }
  for (int k = 0; k < 3; ++k)
    if (rng.bernoulli(0.5)) ids[rng.below(h * w)] = 1;
  if (margin)
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c)
        if (r < margin || c < margin || r + margin >= h || c + margin >= w) ids[r * w + c] = 0;
  return LabelMap(1, h, w, ids, s);
}

// Neighbourhood-scan boundary: fewer than four in-region 4-neighbours.
std::vector<std::pair<double, double>> boundary_oracle(const LabelMap& m) {
  std::vector<std::pair<double, double>> pts;
  const long h = m.height(), w = m.width();
  for (long r = 0; r < h; ++r)
    for (long c = 0; c < w; ++c) {
      if (m.at(r, c) != 1) continue;
      int inside = 0;
      const long dr[] = {-1, 1, 0, 0}, dc[] = {0, 0, -1, 1};
      for (int k = 0; k < 4; ++k) {
        const long rr = r + dr[k], cc = c + dc[k];
        inside += rr >= 0 && cc >= 0 && rr < h && cc < w && m.at(rr, cc) == 1;
      }
      if (inside < 4) pts.emplace_back(r * m.spacing().row_mm, c * m.spacing().col_mm);
    }
  return pts;
}

std::vector<double> all_pairs(const std::vector<std::pair<double, double>>& from,
                              const std::vector<std::pair<double, double>>& to) {
  std::vector<double> out;
  for (auto [a, b] : from) {
    double best = INFINITY;
    for (auto [c, d] : to) best = std::min(best, std::hypot(a - c, b - d));
    out.push_back(best);
  }
  return out;
}

double p95_oracle(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const double h = 0.95 * (v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(h);
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] * (1 - (h - lo)) + v[lo + 1] * (h - lo);
}

LabelMap shifted(const LabelMap& m, std::size_t dr, std::size_t dc) {
  const std::size_t h = m.height() + dr + 3, w = m.width() + dc + 2;
  std::vector<std::uint8_t> ids(h * w, 0);
  for (std::size_t r = 0; r < m.height(); ++r)
    for (std::size_t c = 0; c < m.width(); ++c) ids[(r + dr) * w + c + dc] = m.at(r, c);
  return LabelMap(1, h, w, ids, m.spacing());
}

}  // namespace

TEST_CASE("dsc examples") {
  auto a = mask_from(3, 3, {{0, 0}, {1, 1}});
  CHECK(dsc(a, a, 1) == 1.0);
  CHECK(dsc(a, mask_from(3, 3, {{2, 2}}), 1) == 0.0);
  CHECK(dsc(a, mask_from(3, 3, {{0, 0}, {2, 2}}), 1) == 0.5);
  CHECK(dsc(mask_from(3, 3, {}), mask_from(3, 3, {}), 1) == 1.0);
  CHECK_THROWS_AS(dsc(a, mask_from(3, 4, {}), 1), DimensionError);
}

TEST_CASE("boundary examples") {
  LabelMap full(1, 4, 5, std::vector<std::uint8_t>(20, 1));
  CHECK(extract_boundary(full, 1).size() == 14);
  auto single = extract_boundary(mask_from(5, 5, {{2, 3}}), 1);
  REQUIRE(single.size() == 1);
  CHECK(single.points[0].row == 2);
  CHECK(single.points[0].col == 3);
  std::vector<std::uint8_t> sq(49, 0);
  for (int r = 2; r < 5; ++r)
    for (int c = 2; c < 5; ++c) sq[r * 7 + c] = 1;
  auto b = extract_boundary(LabelMap(1, 7, 7, sq), 1);
  CHECK(b.size() == 8);
  for (const auto& p : b.points) CHECK(!(p.row == 3 && p.col == 3));
  CHECK(extract_boundary(mask_from(3, 3, {}), 1).empty());
}

TEST_CASE("hd95 and msd examples") {
  auto a = mask_from(5, 8, {{2, 1}}), b = mask_from(5, 8, {{2, 4}});
  CHECK(*hd95(a, b, 1) == 3.0);
  CHECK(*hd95(a, a, 1) == 0.0);
  CHECK(*msd(a, a, 1) == 0.0);
  auto c = mask_from(8, 3, {{1, 1}}, {1.5, 1}), d = mask_from(8, 3, {{5, 1}}, {1.5, 1});
  CHECK(*msd(c, d, 1) == 6.0);
  CHECK_FALSE(hd95(a, mask_from(5, 8, {}), 1).has_value());
  CHECK_FALSE(msd(mask_from(5, 8, {}), b, 1).has_value());
  CHECK_FALSE(hd95(mask_from(5, 8, {}), mask_from(5, 8, {}), 1).has_value());
}

TEST_CASE("percentile uses linear interpolation") {
  CHECK(percentile({4, 1, 3, 2}, 0.95) == doctest::Approx(3.85).epsilon(1e-15));
  CHECK(percentile({7}, 0.95) == 7);
  CHECK(percentile({0, 10}, 0.5) == 5);
}

TEST_CASE("boundary and distances match all-pairs oracles on 200 random pairs") {
  Rng rng(17);
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t h = 1 + rng.below(32), w = 1 + rng.below(32);
    const Spacing s{rng.uniform(0.3, 3.0), rng.uniform(0.3, 3.0)};
    auto t = random_mask(h, w, rng, s), p = random_mask(h, w, rng, s);
    auto bt = boundary_oracle(t), bp = boundary_oracle(p);
    auto et = extract_boundary(t, 1);
    REQUIRE(et.size() == bt.size());
    for (std::size_t i = 0; i < bt.size(); ++i) {
      CHECK(et.points[i].row_mm == bt[i].first);
      CHECK(et.points[i].col_mm == bt[i].second);
    }
    if (bt.empty() || bp.empty()) {
      CHECK_FALSE(hd95(t, p, 1).has_value());
      continue;
    }
    auto tp = all_pairs(bt, bp), pt = all_pairs(bp, bt);
    const double hd = std::max(p95_oracle(tp), p95_oracle(pt));
    double sum = 0;
    for (double v : tp) sum += v;
    for (double v : pt) sum += v;
    CHECK(std::abs(*hd95(t, p, 1) - hd) <= 1e-9);
    CHECK(std::abs(*msd(t, p, 1) - sum / (tp.size() + pt.size())) <= 1e-9);
    CHECK(std::abs(dsc(t, p, 1) - dsc(p, t, 1)) == 0.0);
    ++checked;
  }
  CHECK(checked > 150);
}

TEST_CASE("metric properties: symmetry, scale covariance, translation invariance") {
  Rng rng(18);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t h = 4 + rng.below(28), w = 4 + rng.below(28);
    const Spacing s{rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)};
    auto a = random_mask(h, w, rng, s, 1), b = random_mask(h, w, rng, s, 1);
    if (a.count(1) == 0 || b.count(1) == 0) continue;
    CHECK(*hd95(a, b, 1) == *hd95(b, a, 1));
    CHECK(*msd(a, b, 1) == *msd(b, a, 1));
    const double d = dsc(a, b, 1);
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
    CHECK(dsc(a, a, 1) == 1.0);
    CHECK(*hd95(a, a, 1) == 0.0);

    LabelMap a2 = a, b2 = b;
    a2.set_spacing({2 * s.row_mm, 2 * s.col_mm});
    b2.set_spacing({2 * s.row_mm, 2 * s.col_mm});
    CHECK(*hd95(a2, b2, 1) == 2 * *hd95(a, b, 1));
    CHECK(*msd(a2, b2, 1) == 2 * *msd(a, b, 1));
    CHECK(dsc(a2, b2, 1) == d);

    const std::size_t dr = rng.below(5), dc = rng.below(5);
    auto as = shifted(a, dr, dc), bs = shifted(b, dr, dc);
    CHECK(*hd95(as, bs, 1) == *hd95(a, b, 1));
    CHECK(*msd(as, bs, 1) == *msd(a, b, 1));
    CHECK(dsc(as, bs, 1) == d);
  }
}

TEST_CASE("metric report statistics and undefined handling") {
  std::vector<std::string> names{"organ"};
  SUBCASE("single case has zero std") {
    std::vector<LabelMap> t{mask_from(4, 4, {{1, 1}, {1, 2}})}, p{mask_from(4, 4, {{1, 1}})};
    auto r = metric_report(t, p, names);
    CHECK(*r.classes[0].dsc_std == 0.0);
    CHECK(*r.classes[0].hd95_std == 0.0);
    CHECK(r.classes[0].n_valid == 1);
  }
  SUBCASE("two-value statistics") {
    auto [m, s] = mean_std(std::vector<double>{0.8, 1.0});
    CHECK(m == doctest::Approx(0.9));
    CHECK(s == doctest::Approx(std::sqrt(0.02)).epsilon(1e-12));
  }
  SUBCASE("undefined cases are excluded and counted, never scored") {
    std::vector<LabelMap> t{mask_from(4, 4, {{1, 1}}), mask_from(4, 4, {}), mask_from(4, 4, {})};
    std::vector<LabelMap> p{mask_from(4, 4, {}), mask_from(4, 4, {{0, 0}}), mask_from(4, 4, {})};
    auto r = metric_report(t, p, names);
    const auto& c = r.classes[0];
    CHECK(c.n_valid == 0);
    CHECK(c.n_undefined == 2);
    CHECK(c.flagged());
    CHECK_FALSE(c.hd95_mean.has_value());
    CHECK_FALSE(c.msd_mean.has_value());
    CHECK(*c.dsc_mean == 0.0);
  }
  SUBCASE("batched stacks are split into slices") {
    std::vector<LabelMap> one{mask_from(4, 4, {{1, 1}})}, two{mask_from(4, 4, {{2, 2}})};
    std::vector<LabelMap> t{LabelMap::stack(std::vector<LabelMap>{one[0], two[0]})};
    std::vector<LabelMap> p{LabelMap::stack(std::vector<LabelMap>{one[0], one[0]})};
    auto r = metric_report(t, p, names);
    CHECK(r.classes[0].n_valid == 2);
    CHECK(*r.classes[0].dsc_mean == 0.5);
  }
}

TEST_CASE("metric report round-trips through CSV") {
  Rng rng(19);
  std::vector<LabelMap> t, p;
  for (int i = 0; i < 6; ++i) {
    std::vector<std::uint8_t> a(100), b(100);
    for (auto& v : a) v = static_cast<std::uint8_t>(rng.below(4));
    for (auto& v : b) v = static_cast<std::uint8_t>(rng.below(3));
    t.emplace_back(1, 10, 10, a);
    p.emplace_back(1, 10, 10, b);
  }
  std::vector<std::string> names{"a", "b", "c", "d"};
  auto r = metric_report(t, p, names);
  CHECK(r.classes.size() == 4);
  CHECK(r.classes[3].flagged());
  CHECK(MetricReport::from_csv(r.to_csv()) == r);
  CHECK(r.to_csv().find("NA") != std::string::npos);
  CHECK_THROWS_AS(MetricReport::from_csv("bad\n"), FormatError);
}
