#include "waunet/phantom/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "waunet/tensor/errors.hpp"
#include "waunet/tensor/wtf1.hpp"

namespace waunet::phantom {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kFormat = "waunet-phantoms/1";

std::string case_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "case_%04zu", i);
  return buf;
}

const char* family_name(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::ellipse:
      return "ellipse";
    case ShapeFamily::paired:
      return "paired";
    case ShapeFamily::strip:
      return "strip";
    case ShapeFamily::ring:
      return "ring";
  }
  return "?";
}

ShapeFamily family_from(const std::string& s) {
  for (auto f : {ShapeFamily::ellipse, ShapeFamily::paired, ShapeFamily::strip, ShapeFamily::ring})
    if (s == family_name(f)) return f;
  throw FormatError("dataset manifest: unknown shape family '" + s + "'");
}

json range(const double (&r)[2]) { return json::array({r[0], r[1]}); }

void read_range(const json& j, double (&r)[2]) {
  r[0] = j.at(0).get<double>();
  r[1] = j.at(1).get<double>();
}

json recipe_json(const OrganRecipe& r) {
  return {{"name", r.name},
          {"family", family_name(r.family)},
          {"center", {r.center_row, r.center_col}},
          {"jitter", r.jitter},
          {"radius_row", range(r.radius_row)},
          {"radius_col", range(r.radius_col)},
          {"lateral", range(r.lateral)},
          {"thickness", range(r.thickness)},
          {"contrast", r.contrast},
          {"area_fraction", range(r.area_fraction)}};
}

OrganRecipe recipe_from(const json& j) {
  OrganRecipe r;
  r.name = j.at("name").get<std::string>();
  r.family = family_from(j.at("family").get<std::string>());
  r.center_row = j.at("center").at(0).get<double>();
  r.center_col = j.at("center").at(1).get<double>();
  r.jitter = j.at("jitter").get<double>();
  read_range(j.at("radius_row"), r.radius_row);
  read_range(j.at("radius_col"), r.radius_col);
  read_range(j.at("lateral"), r.lateral);
  read_range(j.at("thickness"), r.thickness);
  r.contrast = j.at("contrast").get<double>();
  read_range(j.at("area_fraction"), r.area_fraction);
  return r;
}

json manifest(const Dataset& ds) {
  json recipes = json::array();
  for (const auto& r : ds.spec.resolved_recipes()) recipes.push_back(recipe_json(r));
  json names = json::array();
  for (const auto& c : ds.cases) names.push_back(c.name);
  auto split_names = [&](const std::vector<std::size_t>& idx) {
    json out = json::array();
    for (auto i : idx) out.push_back(ds.cases.at(i).name);
    return out;
  };
  return {{"format", kFormat},
          {"spec",
           {{"size", ds.spec.size},
            {"num_organs", ds.spec.num_organs},
            {"seed", ds.spec.seed},
            {"noise_std", ds.spec.noise_std},
            {"background", ds.spec.background},
            {"max_attempts", ds.spec.max_attempts},
            {"recipes", recipes}}},
          {"class_names", ds.class_names},
          {"spacing_mm", {1.0, 1.0}},
          {"cases", names},
          {"split",
           {{"train", split_names(ds.split.train)},
            {"val", split_names(ds.split.val)},
            {"test", split_names(ds.split.test)}}}};
}

void prepare_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_directory(dir))
    throw UsageError(dir.string() + " exists and is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw UsageError(dir.string() + " is not empty (use --force to overwrite)");
    for (const auto& entry : fs::directory_iterator(dir)) {
      const auto name = entry.path().filename().string();
      if ((name.starts_with("case_") && name.ends_with(".wtf1")) || name == "manifest.json")
        fs::remove(entry.path());
    }
  }
  fs::create_directories(dir);
}

}  // namespace

Split split_cases(std::size_t n, const SplitRatios& ratios, std::uint64_t seed) {
  for (double r : {ratios.train, ratios.val, ratios.test})
    if (!(r >= 0.0)) throw ConfigError("split ratios must be non-negative");
  const auto nv = static_cast<std::size_t>(std::floor(double(n) * ratios.val + 1e-9));
  const auto nt = static_cast<std::size_t>(std::floor(double(n) * ratios.test + 1e-9));
  if (nv + nt > n) throw ConfigError("split ratios exceed the case count");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(seed, hash_name("split")));
  rng.shuffle(order);
  Split s;
  s.val.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(nv));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(nv),
                order.begin() + static_cast<std::ptrdiff_t>(nv + nt));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(nv + nt), order.end());
  for (auto* v : {&s.train, &s.val, &s.test}) std::sort(v->begin(), v->end());
  return s;
}

std::vector<const Case*> Dataset::subset(const std::vector<std::size_t>& indices) const {
  std::vector<const Case*> out;
  for (auto i : indices) out.push_back(&cases.at(i));
  return out;
}

std::uint64_t case_seed(std::uint64_t dataset_seed, std::size_t index) {
  return mix_seed(dataset_seed, index);
}

Dataset generate_dataset(const fs::path& dir, const PhantomSpec& spec, std::size_t count,
                         const SplitRatios& ratios, bool force) {
  if (count == 0) throw UsageError("dataset needs at least one case");
  Dataset ds;
  ds.root = dir;
  ds.spec = spec;
  for (const auto& r : spec.resolved_recipes()) ds.class_names.push_back(r.name);
  for (std::size_t i = 0; i < count; ++i) {
    PhantomSpec s = spec;
    s.seed = case_seed(spec.seed, i);
    ds.cases.push_back({case_name(i), generate_phantom(s)});
  }
  ds.split = split_cases(count, ratios, spec.seed);
  write_dataset(ds, force);
  return ds;
}

void write_dataset(const Dataset& ds, bool force) {
  prepare_dir(ds.root, force);
  for (const auto& c : ds.cases) {
    wtf1::save(ds.root / (c.name + "_img.wtf1"), c.data.image);
    wtf1::save(ds.root / (c.name + "_lbl.wtf1"), c.data.labels);
  }
  std::ofstream out(ds.root / "manifest.json", std::ios::trunc);
  if (!out) throw FormatError("cannot write " + (ds.root / "manifest.json").string());
  out << manifest(ds).dump(2) << "\n";
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  std::ifstream in(mpath);
  if (!in) throw FormatError("dataset: cannot open " + mpath.string());
  Dataset ds;
  ds.root = dir;
  try {
    const json m = json::parse(in);
    if (m.at("format") != kFormat) throw FormatError("dataset: " + mpath.string() + ": unknown format");
    const auto& s = m.at("spec");
    ds.spec.size = s.at("size");
    ds.spec.num_organs = s.at("num_organs");
    ds.spec.seed = s.at("seed");
    ds.spec.noise_std = s.at("noise_std");
    ds.spec.background = s.at("background");
    ds.spec.max_attempts = s.at("max_attempts");
    for (const auto& r : s.at("recipes")) ds.spec.recipes.push_back(recipe_from(r));
    ds.class_names = m.at("class_names").get<std::vector<std::string>>();
    const Spacing spacing{m.at("spacing_mm").at(0).get<double>(),
                          m.at("spacing_mm").at(1).get<double>()};
    auto names = m.at("cases").get<std::vector<std::string>>();
    std::sort(names.begin(), names.end());
    for (const auto& name : names) {
      Case c{name, {wtf1::load_tensor(dir / (name + "_img.wtf1")),
                    wtf1::load_labels(dir / (name + "_lbl.wtf1"), spacing)}};
      ds.cases.push_back(std::move(c));
    }
    auto lookup = [&](const std::string& name) {
      auto it = std::lower_bound(names.begin(), names.end(), name);
      if (it == names.end() || *it != name)
        throw FormatError("dataset: " + mpath.string() + ": split names unknown case " + name);
      return static_cast<std::size_t>(it - names.begin());
    };
    const auto& sp = m.at("split");
    for (auto [key, dst] : {std::pair{"train", &ds.split.train}, std::pair{"val", &ds.split.val},
                            std::pair{"test", &ds.split.test}}) {
      for (const auto& n : sp.at(key)) dst->push_back(lookup(n.get<std::string>()));
      std::sort(dst->begin(), dst->end());
    }
  } catch (const json::exception& e) {
    throw FormatError("dataset: " + mpath.string() + ": " + e.what());
  }
  return ds;
}

}  // namespace waunet::phantom
