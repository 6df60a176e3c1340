#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "waunet/tensor/label_map.hpp"
#include "waunet/tensor/tensor.hpp"

// "WTF1" array file: 8-byte magic "WAUTNSR1", u8 dtype code (0=f32, 1=f64,
// 2=u8), u8 rank, rank little-endian u32 extents, then the row-major payload
// in little-endian order.
namespace waunet::wtf1 {

enum class Code : std::uint8_t { f32 = 0, f64 = 1, u8 = 2 };

struct Array {
  Code code = Code::f32;
  std::vector<std::uint32_t> shape;
  std::vector<std::byte> payload;  // little-endian element bytes
};

std::vector<std::byte> encode(const Array& a);
// `origin` names the source in error messages.
Array decode(std::span<const std::byte> bytes, const std::string& origin = "<memory>");

Array from_tensor(const Tensor& t);
Tensor to_tensor(const Array& a);
Array from_labels(const LabelMap& labels);
// Rank-2 arrays give a single slice, rank-3 arrays a batch.
LabelMap to_labels(const Array& a, Spacing spacing = {});

void write_file(const std::filesystem::path& path, const Array& a);
Array read_file(const std::filesystem::path& path);

inline void save(const std::filesystem::path& path, const Tensor& t) {
  write_file(path, from_tensor(t));
}
inline Tensor load_tensor(const std::filesystem::path& path) { return to_tensor(read_file(path)); }
inline void save(const std::filesystem::path& path, const LabelMap& l) {
  write_file(path, from_labels(l));
}
inline LabelMap load_labels(const std::filesystem::path& path, Spacing spacing = {}) {
  return to_labels(read_file(path), spacing);
}

}  // namespace waunet::wtf1
