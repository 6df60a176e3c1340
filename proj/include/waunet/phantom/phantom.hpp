#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "waunet/tensor/label_map.hpp"
#include "waunet/tensor/rng.hpp"
#include "waunet/tensor/tensor.hpp"

namespace waunet::phantom {

enum class ShapeFamily { ellipse, paired, strip, ring };

// Placement and appearance of one organ class. Positions and radii are
// fractions of the image size; ranges are [lo, hi].
struct OrganRecipe {
  std::string name;
  ShapeFamily family = ShapeFamily::ellipse;
  double center_row = 0.5, center_col = 0.5;
  double jitter = 0.03;                  // uniform +/- on both centre coordinates
  double radius_row[2] = {0.05, 0.08};   // semi-axis along rows
  double radius_col[2] = {0.05, 0.08};   // semi-axis along columns
  double lateral[2] = {0.0, 0.0};        // paired: column offset of each copy
  double thickness[2] = {0.0, 0.0};      // ring: band width
  double contrast = 0.2;                 // added to the background intensity
  double area_fraction[2] = {0.0, 1.0};  // accepted pixel count / (size*size)
};

// Recipes for classes 1..10: brainstem, mandible, parotids, chiasm, spinal
// cord, optic nerves, eyes, larynx, oesophagus, cochleae.
const std::vector<OrganRecipe>& default_recipes();

struct PhantomSpec {
  std::size_t size = 32;
  std::size_t num_organs = 4;
  std::uint64_t seed = 0;
  double noise_std = 0.03;
  double background = 0.3;
  std::size_t max_attempts = 500;
  // Empty uses the first num_organs default recipes.
  std::vector<OrganRecipe> recipes;

  std::vector<OrganRecipe> resolved_recipes() const;
  // Inclusive pixel-count range accepted for class k (1-based).
  std::pair<std::size_t, std::size_t> pixel_range(std::size_t k) const;
};

struct Phantom {
  Tensor image;     // [1, H, W] f32, values in [0, 1]
  LabelMap labels;  // 1 x H x W, spacing (1, 1)
};

// Deterministic in spec.seed. Throws GenerationError when no layout within
// max_attempts satisfies disjointness and every class's size range.
Phantom generate_phantom(const PhantomSpec& spec);

// Symmetric crop to target x target; when the excess is odd the window sits
// one pixel toward the top-left.
Phantom center_crop(const Phantom& p, std::size_t target);

struct AugmentParams {
  double max_shift = 3.2;      // pixels
  double max_rotation = 15.0;  // degrees
  bool flip_h = true;
  bool flip_v = true;
  double flip_probability = 0.5;
  std::uint64_t seed = 0;

  // Defaults scaled to the image: shift 10% of the size.
  static AugmentParams for_size(std::size_t size, std::uint64_t seed);
};

// Applied as flip, then rotation about the image centre, then shift.
struct Transform {
  long dy = 0, dx = 0;
  double angle_deg = 0.0;
  bool flip_h = false, flip_v = false;
  bool identity() const { return !dy && !dx && angle_deg == 0.0 && !flip_h && !flip_v; }
};

Transform sample_transform(const AugmentParams& params, Rng& rng);

// Image resampled bilinearly, labels by nearest neighbour; samples from
// outside the frame read as 0 / background.
Phantom apply_transform(const Phantom& p, const Transform& t);

Phantom augment(const Phantom& p, const AugmentParams& params);

}  // namespace waunet::phantom
