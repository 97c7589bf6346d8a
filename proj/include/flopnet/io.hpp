#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "flopnet/tensor.hpp"

namespace flopnet {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u32_le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 |
         std::uint32_t(b[3]) << 24;
}

inline void put_u64_le(std::ostream& os, std::uint64_t v) {
  put_u32_le(os, static_cast<std::uint32_t>(v));
  put_u32_le(os, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint64_t get_u64_le(std::istream& is) {
  const std::uint64_t lo = get_u32_le(is);
  const std::uint64_t hi = get_u32_le(is);
  return lo | hi << 32;
}

}  // namespace detail

// Tensor dump format "EQT1":
//   magic "EQT1" | u8 dtype (0=f32, 1=f64) | u8 rank | 2 zero bytes |
//   rank x u32 little-endian extents | row-major little-endian scalars.
template <typename S>
void write_eqt1(std::ostream& os, const Tensor<S>& t) {
  os.write("EQT1", 4);
  const unsigned char head[4] = {dtype_code<S>(), static_cast<unsigned char>(t.rank()), 0, 0};
  os.write(reinterpret_cast<const char*>(head), 4);
  for (Index i = 0; i < t.rank(); ++i)
    detail::put_u32_le(os, static_cast<std::uint32_t>(t.extent(i)));
  for (Index i = 0; i < t.size(); ++i) {
    if constexpr (std::is_same_v<S, float>)
      detail::put_u32_le(os, std::bit_cast<std::uint32_t>(t[i]));
    else
      detail::put_u64_le(os, std::bit_cast<std::uint64_t>(t[i]));
  }
  if (!os) throw IoError("EQT1 write failed");
}

template <typename S>
Tensor<S> read_eqt1(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "EQT1") throw IoError("bad EQT1 magic");
  unsigned char head[4];
  is.read(reinterpret_cast<char*>(head), 4);
  if (!is || head[2] != 0 || head[3] != 0) throw IoError("bad EQT1 header");
  if (head[0] != dtype_code<S>())
    throw IoError("EQT1 dtype mismatch: stored code " + std::to_string(int(head[0])));
  Shape shape(head[1]);
  for (auto& e : shape) e = static_cast<Index>(detail::get_u32_le(is));
  Tensor<S> t(shape);
  for (Index i = 0; i < t.size(); ++i) {
    if constexpr (std::is_same_v<S, float>)
      t[i] = std::bit_cast<float>(detail::get_u32_le(is));
    else
      t[i] = std::bit_cast<double>(detail::get_u64_le(is));
  }
  if (!is) throw IoError("truncated EQT1 stream");
  return t;
}

template <typename S>
void write_eqt1_file(const std::string& path, const Tensor<S>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  write_eqt1(os, t);
}

template <typename S>
Tensor<S> read_eqt1_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for read: " + path);
  return read_eqt1<S>(is);
}

}  // namespace flopnet
