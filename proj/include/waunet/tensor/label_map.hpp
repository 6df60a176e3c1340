#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "waunet/tensor/errors.hpp"

namespace waunet {

// Physical pixel size in millimetres.
struct Spacing {
  double row_mm = 1.0;
  double col_mm = 1.0;
  bool operator==(const Spacing&) const = default;
};

// Integer class id per pixel, 0 = background. Either a single H x W slice
// (batch() == 1) or N independent slices.
class LabelMap {
 public:
  LabelMap() = default;
  LabelMap(std::size_t height, std::size_t width, Spacing spacing = {});
  LabelMap(std::size_t batch, std::size_t height, std::size_t width, Spacing spacing = {});
  LabelMap(std::size_t batch, std::size_t height, std::size_t width, std::vector<std::uint8_t> ids,
           Spacing spacing = {});

  static LabelMap stack(std::span<const LabelMap> slices);

  std::size_t batch() const { return batch_; }
  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t size() const { return ids_.size(); }
  const Spacing& spacing() const { return spacing_; }
  void set_spacing(Spacing s);

  std::uint8_t at(std::size_t r, std::size_t c) const { return ids_[r * width_ + c]; }
  std::uint8_t& at(std::size_t r, std::size_t c) { return ids_[r * width_ + c]; }
  std::uint8_t at(std::size_t n, std::size_t r, std::size_t c) const {
    return ids_[(n * height_ + r) * width_ + c];
  }
  std::uint8_t& at(std::size_t n, std::size_t r, std::size_t c) {
    return ids_[(n * height_ + r) * width_ + c];
  }

  std::span<const std::uint8_t> ids() const { return ids_; }
  std::span<std::uint8_t> ids() { return ids_; }

  LabelMap slice(std::size_t n) const;
  std::uint8_t max_id() const;
  std::size_t count(std::uint8_t class_id) const;

  bool operator==(const LabelMap&) const = default;

 private:
  std::size_t batch_ = 0;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<std::uint8_t> ids_;
  Spacing spacing_;
};

}  // namespace waunet
