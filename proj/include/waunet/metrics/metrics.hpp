#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "waunet/tensor/label_map.hpp"

namespace waunet::metrics {

// All per-class metrics below act on single-slice label maps (batch 1).
// Batched stacks are split into independent slices by metric_report.

struct BoundaryPoint {
  std::size_t row = 0, col = 0;  // pixel index
  double row_mm = 0.0, col_mm = 0.0;
};

struct BoundarySet {
  std::vector<BoundaryPoint> points;  // raster order
  bool empty() const { return points.empty(); }
  std::size_t size() const { return points.size(); }
};

// 2|T∩P| / (|T|+|P|); 1 when the class is absent from both.
double dsc(const LabelMap& truth, const LabelMap& pred, std::uint8_t class_id);

// Region pixels with a 4-neighbour outside the region or on the image border.
BoundarySet extract_boundary(const LabelMap& mask, std::uint8_t class_id);

// Euclidean distance in mm from every point of `from` to the nearest point
// of `to`, in the order of `from`. `to` must be non-empty.
std::vector<double> nearest_distances(const BoundarySet& from, const BoundarySet& to,
                                      std::size_t height, std::size_t width, Spacing spacing);

// Linear interpolation between the closest order statistics, q in [0, 1].
double percentile(std::vector<double> values, double q);

// Symmetric 95th percentile Hausdorff distance in mm. Empty when either
// region is empty.
std::optional<double> hd95(const LabelMap& truth, const LabelMap& pred, std::uint8_t class_id);

// Mean surface distance in mm over both boundary sets. Empty when either
// region is empty.
std::optional<double> msd(const LabelMap& truth, const LabelMap& pred, std::uint8_t class_id);

struct ClassSummary {
  std::string name;
  std::uint8_t class_id = 0;
  std::optional<double> dsc_mean, dsc_std;
  std::optional<double> hd95_mean, hd95_std;
  std::optional<double> msd_mean, msd_std;
  std::size_t n_valid = 0;      // cases where both regions are present
  std::size_t n_undefined = 0;  // cases where exactly one is present
  // No case has both regions, so the distance metrics have no support.
  bool flagged() const { return n_valid == 0; }
  bool operator==(const ClassSummary&) const = default;
};

struct MetricReport {
  std::vector<ClassSummary> classes;
  bool operator==(const MetricReport&) const = default;

  std::string to_csv() const;
  static MetricReport from_csv(const std::string& text);
  std::string to_json() const;
  void write(const std::filesystem::path& csv_path) const;  // also writes <stem>.json
};

// Per-class statistics over paired cases for foreground classes 1..names.size().
// DSC is averaged over cases where the class appears in truth or prediction;
// HD95 and MSD over cases where it appears in both.
MetricReport metric_report(std::span<const LabelMap> truth, std::span<const LabelMap> pred,
                           std::span<const std::string> class_names);

// Mean and sample standard deviation (0 for a single value).
std::pair<double, double> mean_std(std::span<const double> values);

}  // namespace waunet::metrics
