#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "waunet/tensor/label_map.hpp"
#include "waunet/tensor/tensor.hpp"

namespace waunet::render {

using Rgb = std::array<std::uint8_t, 3>;

struct RgbImage {
  std::size_t height = 0, width = 0;
  std::vector<Rgb> pixels;  // row-major

  const Rgb& at(std::size_t r, std::size_t c) const { return pixels[r * width + c]; }
};

// Fixed palette; class 0 is black, ids beyond the table wrap around 1..
Rgb class_color(std::uint8_t id);

// Grayscale bytes of a [1,H,W] image, intensities clamped to [0, 1].
std::vector<std::uint8_t> grayscale(const Tensor& image);

// Prediction (left) and truth (right) tinted over the grayscale image.
RgbImage overlay(const Tensor& image, const LabelMap& prediction, const LabelMap& truth);

// Agreement is black; a disagreeing pixel takes the truth class color, or the
// predicted class color where the truth is background.
RgbImage difference_map(const LabelMap& prediction, const LabelMap& truth);

void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               const std::vector<std::uint8_t>& gray);
void write_ppm(const std::filesystem::path& path, const RgbImage& image);

}  // namespace waunet::render
