#include "waunet/render/render.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "waunet/tensor/errors.hpp"

namespace waunet::render {

namespace {

constexpr Rgb kPalette[] = {{230, 25, 75},  {60, 180, 75},  {255, 225, 25}, {0, 130, 200},
                            {245, 130, 48}, {145, 30, 180}, {70, 240, 240}, {240, 50, 230},
                            {210, 245, 60}, {250, 190, 212}};
constexpr std::size_t kPaletteSize = sizeof kPalette / sizeof kPalette[0];

void check_slice(const LabelMap& a, const LabelMap& b) {
  if (a.batch() != 1 || b.batch() != 1 || a.height() != b.height() || a.width() != b.width())
    throw DimensionError("render: label maps must be single slices of equal size");
}

std::ofstream open(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  return out;
}

}  // namespace

Rgb class_color(std::uint8_t id) {
  if (id == 0) return {0, 0, 0};
  return kPalette[(id - 1) % kPaletteSize];
}

std::vector<std::uint8_t> grayscale(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 1)
    throw DimensionError("render: expected a [1,H,W] image, got " + shape_str(image.shape()));
  std::vector<std::uint8_t> out;
  for (double v : image.to_vector())
    out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  return out;
}

RgbImage overlay(const Tensor& image, const LabelMap& prediction, const LabelMap& truth) {
  check_slice(prediction, truth);
  const auto gray = grayscale(image);
  const std::size_t h = prediction.height(), w = prediction.width();
  if (gray.size() != h * w) throw DimensionError("render: image and labels differ in size");
  RgbImage out{h, 2 * w, std::vector<Rgb>(h * 2 * w)};
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const std::uint8_t g = gray[r * w + c];
      for (std::size_t side = 0; side < 2; ++side) {
        const std::uint8_t id = side == 0 ? prediction.at(r, c) : truth.at(r, c);
        Rgb px{g, g, g};
        if (id) {
          const Rgb k = class_color(id);
          for (int ch = 0; ch < 3; ++ch) px[ch] = static_cast<std::uint8_t>((g + 2 * k[ch]) / 3);
        }
        out.pixels[r * 2 * w + side * w + c] = px;
      }
    }
  return out;
}

RgbImage difference_map(const LabelMap& prediction, const LabelMap& truth) {
  check_slice(prediction, truth);
  const std::size_t h = prediction.height(), w = prediction.width();
  RgbImage out{h, w, std::vector<Rgb>(h * w)};
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const std::uint8_t p = prediction.at(r, c), t = truth.at(r, c);
      out.pixels[r * w + c] = p == t ? Rgb{0, 0, 0} : class_color(t ? t : p);
    }
  return out;
}

void write_pgm(const std::filesystem::path& path, std::size_t height, std::size_t width,
               const std::vector<std::uint8_t>& gray) {
  if (gray.size() != height * width) throw DimensionError("write_pgm: size mismatch");
  auto out = open(path);
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(gray.data()), static_cast<std::streamsize>(gray.size()));
}

void write_ppm(const std::filesystem::path& path, const RgbImage& image) {
  auto out = open(path);
  out << "P6\n" << image.width << " " << image.height << "\n255\n";
  for (const auto& px : image.pixels) out.write(reinterpret_cast<const char*>(px.data()), 3);
}

}  // namespace waunet::render
