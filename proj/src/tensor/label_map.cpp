#include "waunet/tensor/label_map.hpp"

#include <algorithm>
#include <string>

namespace waunet {

namespace {

void check_spacing(const Spacing& s) {
  if (!(s.row_mm > 0.0) || !(s.col_mm > 0.0))
    throw DimensionError("label map spacing must be positive");
}

}  // namespace

LabelMap::LabelMap(std::size_t height, std::size_t width, Spacing spacing)
    : LabelMap(1, height, width, spacing) {}

LabelMap::LabelMap(std::size_t batch, std::size_t height, std::size_t width, Spacing spacing)
    : LabelMap(batch, height, width, std::vector<std::uint8_t>(batch * height * width, 0),
               spacing) {}

LabelMap::LabelMap(std::size_t batch, std::size_t height, std::size_t width,
                   std::vector<std::uint8_t> ids, Spacing spacing)
    : batch_(batch), height_(height), width_(width), ids_(std::move(ids)), spacing_(spacing) {
  if (batch == 0 || height == 0 || width == 0)
    throw DimensionError("label map extents must be positive");
  if (ids_.size() != batch * height * width)
    throw DimensionError("label map holds " + std::to_string(ids_.size()) + " ids, expected " +
                         std::to_string(batch * height * width));
  check_spacing(spacing_);
}

LabelMap LabelMap::stack(std::span<const LabelMap> slices) {
  if (slices.empty()) throw DimensionError("cannot stack zero label maps");
  const auto& first = slices.front();
  std::vector<std::uint8_t> ids;
  std::size_t n = 0;
  for (const auto& s : slices) {
    if (s.height() != first.height() || s.width() != first.width())
      throw DimensionError("stacked label maps must share H and W");
    ids.insert(ids.end(), s.ids().begin(), s.ids().end());
    n += s.batch();
  }
  return LabelMap(n, first.height(), first.width(), std::move(ids), first.spacing());
}

void LabelMap::set_spacing(Spacing s) {
  check_spacing(s);
  spacing_ = s;
}

LabelMap LabelMap::slice(std::size_t n) const {
  if (n >= batch_) throw DimensionError("label map slice index out of range");
  const std::size_t plane = height_ * width_;
  std::vector<std::uint8_t> ids(ids_.begin() + static_cast<std::ptrdiff_t>(n * plane),
                                ids_.begin() + static_cast<std::ptrdiff_t>((n + 1) * plane));
  return LabelMap(1, height_, width_, std::move(ids), spacing_);
}

std::uint8_t LabelMap::max_id() const {
  return ids_.empty() ? 0 : *std::max_element(ids_.begin(), ids_.end());
}

std::size_t LabelMap::count(std::uint8_t class_id) const {
  return static_cast<std::size_t>(std::count(ids_.begin(), ids_.end(), class_id));
}

}  // namespace waunet
