#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "dtsst/errors.hpp"

// Little-endian primitives shared by the tensor and checkpoint formats.
namespace dtsst::binio {

static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");

inline void put_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline void put_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }

inline void put_f32(std::ostream& os, float v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline void read_exact(std::istream& is, void* dst, std::size_t n, const std::string& what) {
  is.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw DataError("truncated " + what);
}

inline std::uint32_t get_u32(std::istream& is, const std::string& what) {
  std::uint32_t v = 0;
  read_exact(is, &v, sizeof v, what);
  return v;
}

inline std::uint8_t get_u8(std::istream& is, const std::string& what) {
  std::uint8_t v = 0;
  read_exact(is, &v, 1, what);
  return v;
}

}  // namespace dtsst::binio

#include <vector>

#include "dtsst/tensor.hpp"

namespace dtsst::binio {

// u8 rank, rank x u32 extents, float32 payload.
inline void put_tensor_body(std::ostream& os, const Tensor& t) {
  if (t.dim() > 255) throw ShapeError("tensor rank exceeds 255");
  put_u8(os, static_cast<std::uint8_t>(t.dim()));
  for (auto e : t.shape()) {
    if (e > 0xFFFFFFFFull) throw ShapeError("tensor extent exceeds u32");
    put_u32(os, static_cast<std::uint32_t>(e));
  }
  for (double v : t.data()) put_f32(os, static_cast<float>(v));
}

inline Tensor get_tensor_body(std::istream& is, const std::string& what) {
  const std::uint8_t rank = get_u8(is, what);
  Shape shape(rank);
  std::uint64_t numel = 1;
  constexpr std::uint64_t kMaxElements = 1ull << 32;
  for (auto& e : shape) {
    e = get_u32(is, what);
    numel *= e;
    if (numel > kMaxElements) throw DataError("extent overflow in " + what);
  }
  std::vector<float> raw(static_cast<std::size_t>(numel));
  read_exact(is, raw.data(), raw.size() * sizeof(float), what + " payload");
  return Tensor::from(std::move(shape), std::vector<double>(raw.begin(), raw.end()));
}

}  // namespace dtsst::binio
