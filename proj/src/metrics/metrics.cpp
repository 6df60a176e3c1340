#include "waunet/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "waunet/tensor/errors.hpp"

namespace waunet::metrics {

namespace {

void require_single(const LabelMap& m, const char* op) {
  if (m.batch() != 1)
    throw UsageError(std::string(op) + ": expected a single slice, got batch " +
                     std::to_string(m.batch()));
}

void require_pair(const LabelMap& a, const LabelMap& b, const char* op) {
  require_single(a, op);
  require_single(b, op);
  if (a.height() != b.height() || a.width() != b.width())
    throw DimensionError(std::string(op) + ": shapes " + std::to_string(a.height()) + "x" +
                         std::to_string(a.width()) + " and " + std::to_string(b.height()) + "x" +
                         std::to_string(b.width()) + " differ");
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// Squared distance transform along one line with per-step weight w:
// out[p] = min_q f[q] + w (p-q)^2, by the lower envelope of parabolas.
void edt_1d(const double* f, std::size_t n, std::size_t stride, double w, double* out,
            std::vector<std::size_t>& v, std::vector<double>& z) {
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  std::size_t k = 0;
  std::size_t first = n;
  for (std::size_t q = 0; q < n; ++q)
    if (f[q * stride] < kInf) {
      first = q;
      break;
    }
  if (first == n) {
    for (std::size_t p = 0; p < n; ++p) out[p * stride] = kInf;
    return;
  }
  v[0] = first;
  z[0] = -kInf;
  z[1] = kInf;
  auto meet = [&](std::size_t q, std::size_t r) {
    const double fq = f[q * stride] + w * double(q) * double(q);
    const double fr = f[r * stride] + w * double(r) * double(r);
    return (fq - fr) / (2.0 * w * (double(q) - double(r)));
  };
  for (std::size_t q = first + 1; q < n; ++q) {
    if (!(f[q * stride] < kInf)) continue;
    double s = meet(q, v[k]);
    while (s <= z[k]) {
      --k;
      s = meet(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  k = 0;
  for (std::size_t p = 0; p < n; ++p) {
    while (z[k + 1] < double(p)) ++k;
    const double d = double(p) - double(v[k]);
    out[p * stride] = f[v[k] * stride] + w * d * d;
  }
}

// Exact squared Euclidean distance (mm^2) to the nearest seed pixel.
std::vector<double> squared_edt(const std::vector<bool>& seeds, std::size_t h, std::size_t w,
                                Spacing s) {
  std::vector<double> f(h * w), g(h * w);
  for (std::size_t i = 0; i < h * w; ++i) f[i] = seeds[i] ? 0.0 : kInf;
  std::vector<std::size_t> v;
  std::vector<double> z;
  for (std::size_t r = 0; r < h; ++r)
    edt_1d(f.data() + r * w, w, 1, s.col_mm * s.col_mm, g.data() + r * w, v, z);
  for (std::size_t c = 0; c < w; ++c)
    edt_1d(g.data() + c, h, w, s.row_mm * s.row_mm, f.data() + c, v, z);
  return f;
}

struct Surfaces {
  BoundarySet truth, pred;
  std::vector<double> truth_to_pred, pred_to_truth;
};

std::optional<Surfaces> surfaces(const LabelMap& truth, const LabelMap& pred, std::uint8_t id,
                                 const char* op) {
  require_pair(truth, pred, op);
  Surfaces s{extract_boundary(truth, id), extract_boundary(pred, id), {}, {}};
  if (s.truth.empty() || s.pred.empty()) return std::nullopt;
  const std::size_t h = truth.height(), w = truth.width();
  s.truth_to_pred = nearest_distances(s.truth, s.pred, h, w, truth.spacing());
  s.pred_to_truth = nearest_distances(s.pred, s.truth, h, w, truth.spacing());
  return s;
}

}  // namespace

double dsc(const LabelMap& truth, const LabelMap& pred, std::uint8_t class_id) {
  require_pair(truth, pred, "dsc");
  std::size_t t = 0, p = 0, both = 0;
  auto a = truth.ids(), b = pred.ids();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool in_t = a[i] == class_id, in_p = b[i] == class_id;
    t += in_t;
    p += in_p;
    both += in_t && in_p;
  }
  if (t + p == 0) return 1.0;
  return 2.0 * double(both) / double(t + p);
}

BoundarySet extract_boundary(const LabelMap& mask, std::uint8_t class_id) {
  require_single(mask, "extract_boundary");
  const std::size_t h = mask.height(), w = mask.width();
  const Spacing s = mask.spacing();
  BoundarySet out;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      if (mask.at(r, c) != class_id) continue;
      const bool edge = r == 0 || c == 0 || r + 1 == h || c + 1 == w ||
                        mask.at(r - 1, c) != class_id || mask.at(r + 1, c) != class_id ||
                        mask.at(r, c - 1) != class_id || mask.at(r, c + 1) != class_id;
      if (edge) out.points.push_back({r, c, double(r) * s.row_mm, double(c) * s.col_mm});
    }
  return out;
}

std::vector<double> nearest_distances(const BoundarySet& from, const BoundarySet& to,
                                      std::size_t height, std::size_t width, Spacing spacing) {
  if (to.empty()) throw UsageError("nearest_distances: target boundary is empty");
  std::vector<bool> seeds(height * width, false);
  for (const auto& p : to.points) seeds[p.row * width + p.col] = true;
  const auto d2 = squared_edt(seeds, height, width, spacing);
  std::vector<double> out;
  out.reserve(from.size());
  for (const auto& p : from.points) out.push_back(std::sqrt(d2[p.row * width + p.col]));
  return out;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw UsageError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q * double(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - double(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

std::optional<double> hd95(const LabelMap& truth, const LabelMap& pred, std::uint8_t class_id) {
  auto s = surfaces(truth, pred, class_id, "hd95");
  if (!s) return std::nullopt;
  return std::max(percentile(s->truth_to_pred, 0.95), percentile(s->pred_to_truth, 0.95));
}

std::optional<double> msd(const LabelMap& truth, const LabelMap& pred, std::uint8_t class_id) {
  auto s = surfaces(truth, pred, class_id, "msd");
  if (!s) return std::nullopt;
  double a = 0, b = 0;
  for (double d : s->truth_to_pred) a += d;
  for (double d : s->pred_to_truth) b += d;
  return (a + b) / double(s->truth_to_pred.size() + s->pred_to_truth.size());
}

std::pair<double, double> mean_std(std::span<const double> values) {
  if (values.empty()) throw UsageError("mean_std of an empty set");
  double m = 0;
  for (double v : values) m += v;
  m /= double(values.size());
  if (values.size() == 1) return {m, 0.0};
  double ss = 0;
  for (double v : values) ss += (v - m) * (v - m);
  return {m, std::sqrt(ss / double(values.size() - 1))};
}

MetricReport metric_report(std::span<const LabelMap> truth, std::span<const LabelMap> pred,
                           std::span<const std::string> class_names) {
  if (truth.size() != pred.size())
    throw DimensionError("metric_report: " + std::to_string(truth.size()) + " truth cases vs " +
                         std::to_string(pred.size()) + " predictions");
  if (class_names.size() > 255) throw UsageError("metric_report: too many classes");
  std::vector<LabelMap> ts, ps;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i].batch() != pred[i].batch())
      throw DimensionError("metric_report: case " + std::to_string(i) + " batch sizes differ");
    for (std::size_t n = 0; n < truth[i].batch(); ++n) {
      ts.push_back(truth[i].slice(n));
      ps.push_back(pred[i].slice(n));
    }
  }
  MetricReport report;
  for (std::size_t k = 0; k < class_names.size(); ++k) {
    const auto id = static_cast<std::uint8_t>(k + 1);
    ClassSummary row;
    row.name = class_names[k];
    row.class_id = id;
    std::vector<double> d, h, m;
    for (std::size_t i = 0; i < ts.size(); ++i) {
      const bool in_t = ts[i].count(id) > 0, in_p = ps[i].count(id) > 0;
      if (!in_t && !in_p) continue;
      d.push_back(dsc(ts[i], ps[i], id));
      if (in_t != in_p) {
        ++row.n_undefined;
        continue;
      }
      ++row.n_valid;
      h.push_back(*hd95(ts[i], ps[i], id));
      m.push_back(*msd(ts[i], ps[i], id));
    }
    if (!d.empty()) std::tie(row.dsc_mean, row.dsc_std) = mean_std(d);
    if (!h.empty()) {
      std::tie(row.hd95_mean, row.hd95_std) = mean_std(h);
      std::tie(row.msd_mean, row.msd_std) = mean_std(m);
    }
    report.classes.push_back(std::move(row));
  }
  return report;
}

}  // namespace waunet::metrics
