#include "waunet/tensor/wtf1.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace waunet::wtf1 {

namespace {

constexpr char kMagic[8] = {'W', 'A', 'U', 'T', 'N', 'S', 'R', '1'};

std::size_t elem_size(Code c) {
  switch (c) {
    case Code::f32:
      return 4;
    case Code::f64:
      return 8;
    case Code::u8:
      return 1;
  }
  return 0;
}

// Payload bytes are little-endian; swap element-wise on big-endian hosts.
void to_host_order(std::span<std::byte> bytes, std::size_t width) {
  if constexpr (std::endian::native == std::endian::little) return;
  for (std::size_t i = 0; i + width <= bytes.size(); i += width)
    for (std::size_t a = 0, b = width - 1; a < b; ++a, --b) std::swap(bytes[i + a], bytes[i + b]);
}

void put_u32(std::vector<std::byte>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(std::span<const std::byte> b, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[at + i]) << (8 * i);
  return v;
}

std::size_t count(const std::vector<std::uint32_t>& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

}  // namespace

std::vector<std::byte> encode(const Array& a) {
  if (a.shape.size() > 255) throw FormatError("wtf1: rank exceeds 255");
  if (a.payload.size() != count(a.shape) * elem_size(a.code))
    throw FormatError("wtf1: payload size does not match shape");
  std::vector<std::byte> out;
  out.reserve(10 + 4 * a.shape.size() + a.payload.size());
  for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
  out.push_back(static_cast<std::byte>(a.code));
  out.push_back(static_cast<std::byte>(a.shape.size()));
  for (auto e : a.shape) put_u32(out, e);
  out.insert(out.end(), a.payload.begin(), a.payload.end());
  return out;
}

Array decode(std::span<const std::byte> bytes, const std::string& origin) {
  auto fail = [&](const std::string& why) -> FormatError {
    return FormatError("wtf1: " + origin + ": " + why);
  };
  if (bytes.size() < 10) throw fail("truncated header");
  if (std::memcmp(bytes.data(), kMagic, 8) != 0) throw fail("bad magic");
  const auto code = static_cast<std::uint8_t>(bytes[8]);
  if (code > 2) throw fail("unknown dtype code " + std::to_string(code));
  Array a;
  a.code = static_cast<Code>(code);
  const std::size_t rank = static_cast<std::uint8_t>(bytes[9]);
  if (bytes.size() < 10 + 4 * rank) throw fail("truncated extents");
  for (std::size_t i = 0; i < rank; ++i) {
    a.shape.push_back(get_u32(bytes, 10 + 4 * i));
    if (a.shape.back() == 0) throw fail("zero extent");
  }
  const std::size_t header = 10 + 4 * rank;
  const std::size_t expected = count(a.shape) * elem_size(a.code);
  if (bytes.size() - header != expected)
    throw fail("payload holds " + std::to_string(bytes.size() - header) + " bytes, expected " +
               std::to_string(expected));
  a.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
  return a;
}

Array from_tensor(const Tensor& t) {
  Array a;
  a.code = t.dtype() == DType::f64 ? Code::f64 : Code::f32;
  for (auto e : t.shape()) a.shape.push_back(static_cast<std::uint32_t>(e));
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto d = t.data<T>();
    a.payload.resize(d.size_bytes());
    std::memcpy(a.payload.data(), d.data(), d.size_bytes());
    to_host_order(a.payload, sizeof(T));
  });
  return a;
}

Tensor to_tensor(const Array& a) {
  if (a.code == Code::u8) throw FormatError("wtf1: u8 array cannot be loaded as a real tensor");
  Shape shape(a.shape.begin(), a.shape.end());
  DType dt = a.code == Code::f64 ? DType::f64 : DType::f32;
  Tensor t = Tensor::zeros(shape, dt);
  dispatch(dt, [&](auto tag) {
    using T = decltype(tag);
    auto d = t.data<T>();
    std::memcpy(d.data(), a.payload.data(), d.size_bytes());
    to_host_order(std::as_writable_bytes(d), sizeof(T));
  });
  return t;
}

Array from_labels(const LabelMap& labels) {
  Array a;
  a.code = Code::u8;
  if (labels.batch() > 1) a.shape.push_back(static_cast<std::uint32_t>(labels.batch()));
  a.shape.push_back(static_cast<std::uint32_t>(labels.height()));
  a.shape.push_back(static_cast<std::uint32_t>(labels.width()));
  auto ids = labels.ids();
  a.payload.resize(ids.size());
  std::memcpy(a.payload.data(), ids.data(), ids.size());
  return a;
}

LabelMap to_labels(const Array& a, Spacing spacing) {
  if (a.code != Code::u8) throw FormatError("wtf1: label maps must be stored as u8");
  if (a.shape.size() != 2 && a.shape.size() != 3)
    throw FormatError("wtf1: label map must have rank 2 or 3");
  const bool batched = a.shape.size() == 3;
  std::vector<std::uint8_t> ids(a.payload.size());
  std::memcpy(ids.data(), a.payload.data(), ids.size());
  return LabelMap(batched ? a.shape[0] : 1, a.shape[batched ? 1 : 0], a.shape[batched ? 2 : 1],
                  std::move(ids), spacing);
}

void write_file(const std::filesystem::path& path, const Array& a) {
  auto bytes = encode(a);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("wtf1: cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("wtf1: write failed for " + path.string());
}

Array read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("wtf1: cannot open " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode(std::as_bytes(std::span<const char>(raw)), path.string());
}

}  // namespace waunet::wtf1
