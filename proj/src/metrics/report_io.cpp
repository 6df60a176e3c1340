#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "waunet/metrics/metrics.hpp"
#include "waunet/tensor/errors.hpp"

namespace waunet::metrics {

namespace {

const char* const kHeader =
    "class,dsc_mean,dsc_std,hd95_mean,hd95_std,msd_mean,msd_std,n_valid,n_undefined";

std::string num(const std::optional<double>& v) {
  if (!v) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", *v);
  return buf;
}

std::optional<double> parse_num(const std::string& s) {
  if (s == "NA") return std::nullopt;
  std::size_t used = 0;
  double v = std::stod(s, &used);
  if (used != s.size()) throw FormatError("metric csv: bad number '" + s + "'");
  return v;
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

nlohmann::json opt(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

std::string MetricReport::to_csv() const {
  std::string out = std::string(kHeader) + "\n";
  for (const auto& c : classes) {
    if (c.name.find_first_of(",\n") != std::string::npos)
      throw UsageError("metric csv: class name '" + c.name + "' contains a separator");
    out += c.name + "," + num(c.dsc_mean) + "," + num(c.dsc_std) + "," + num(c.hd95_mean) + "," +
           num(c.hd95_std) + "," + num(c.msd_mean) + "," + num(c.msd_std) + "," +
           std::to_string(c.n_valid) + "," + std::to_string(c.n_undefined) + "\n";
  }
  return out;
}

MetricReport MetricReport::from_csv(const std::string& text) {
  std::stringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kHeader) throw FormatError("metric csv: bad header");
  MetricReport r;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto cells = split(line);
    if (cells.size() != 9)
      throw FormatError("metric csv: expected 9 columns, got " + std::to_string(cells.size()));
    ClassSummary c;
    c.name = cells[0];
    c.class_id = static_cast<std::uint8_t>(r.classes.size() + 1);
    c.dsc_mean = parse_num(cells[1]);
    c.dsc_std = parse_num(cells[2]);
    c.hd95_mean = parse_num(cells[3]);
    c.hd95_std = parse_num(cells[4]);
    c.msd_mean = parse_num(cells[5]);
    c.msd_std = parse_num(cells[6]);
    c.n_valid = std::stoul(cells[7]);
    c.n_undefined = std::stoul(cells[8]);
    r.classes.push_back(std::move(c));
  }
  return r;
}

std::string MetricReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& c : classes)
    rows.push_back({{"class", c.name},
                    {"class_id", c.class_id},
                    {"dsc_mean", opt(c.dsc_mean)},
                    {"dsc_std", opt(c.dsc_std)},
                    {"hd95_mean", opt(c.hd95_mean)},
                    {"hd95_std", opt(c.hd95_std)},
                    {"msd_mean", opt(c.msd_mean)},
                    {"msd_std", opt(c.msd_std)},
                    {"n_valid", c.n_valid},
                    {"n_undefined", c.n_undefined},
                    {"flagged", c.flagged()}});
  return nlohmann::json{{"classes", rows}}.dump(2) + "\n";
}

void MetricReport::write(const std::filesystem::path& csv_path) const {
  auto put = [](const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::trunc);
    if (!out) throw FormatError("cannot write " + p.string());
    out << text;
  };
  put(csv_path, to_csv());
  auto json_path = csv_path;
  json_path.replace_extension(".json");
  put(json_path, to_json());
}

}  // namespace waunet::metrics
