#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "waunet/phantom/phantom.hpp"

namespace waunet::phantom {

struct SplitRatios {
  double train = 0.7, val = 0.1, test = 0.2;
};

// Case indices per split, each sorted ascending.
struct Split {
  std::vector<std::size_t> train, val, test;
};

// val = floor(n * ratios.val), test = floor(n * ratios.test), the rest goes
// to train; membership comes from a shuffle seeded by `seed`.
Split split_cases(std::size_t n, const SplitRatios& ratios, std::uint64_t seed);

struct Case {
  std::string name;  // case_0000
  Phantom data;
};

struct Dataset {
  std::filesystem::path root;
  PhantomSpec spec;
  std::vector<std::string> class_names;  // foreground classes 1..K-1
  std::vector<Case> cases;               // lexicographic by name
  Split split;

  std::size_t num_classes() const { return class_names.size() + 1; }
  std::vector<const Case*> subset(const std::vector<std::size_t>& indices) const;
};

// Seed of case i derived from the dataset seed.
std::uint64_t case_seed(std::uint64_t dataset_seed, std::size_t index);

// Generates `count` phantoms from `spec` (spec.seed is the dataset seed) and
// writes them with a manifest. Refuses a non-empty directory unless `force`.
Dataset generate_dataset(const std::filesystem::path& dir, const PhantomSpec& spec,
                         std::size_t count, const SplitRatios& ratios, bool force);

void write_dataset(const Dataset& ds, bool force);

// Throws FormatError naming the offending file.
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace waunet::phantom
