#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "protoprop/tensor.hpp"

namespace protoprop {

// Binary tensor blob: magic "PPT1", u32 rank, u32 per dimension, then the
// row-major payload as 64-bit floats. All integers and floats little-endian.
namespace ppt {

inline constexpr char kMagic[4] = {'P', 'P', 'T', '1'};
inline constexpr std::uint32_t kMaxRank = 8;

inline void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline void write_f64(std::ostream& os, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i)
    b[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline double read_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i)
    bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace ppt

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(ppt::kMagic, 4);
  ppt::write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape())
    ppt::write_u32(os, static_cast<std::uint32_t>(d));
  for (std::size_t i = 0; i < t.size(); ++i) ppt::write_f64(os, t.at(i));
  if (!os) throw ContractError("tensor write failed");
}

inline Tensor read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, ppt::kMagic, 4) != 0) {
    throw ContractError("not a PPT1 tensor blob (bad magic)");
  }
  const std::uint32_t rank = ppt::read_u32(is);
  if (rank == 0 || rank > ppt::kMaxRank) {
    throw ContractError("PPT1: unsupported rank " + std::to_string(rank));
  }
  std::vector<std::size_t> shape(rank);
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint32_t d = ppt::read_u32(is);
    if (d == 0) throw ContractError("PPT1: zero dimension");
    shape[i] = d;
    count *= d;
  }
  std::vector<double> values(count);
  for (std::size_t i = 0; i < count; ++i) values[i] = ppt::read_f64(is);
  if (!is) throw ContractError("PPT1: truncated payload");
  return Tensor(std::move(shape), std::move(values));
}

inline void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ContractError("cannot open for writing: " + path);
  write_tensor(os, t);
}

inline Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ContractError("cannot open for reading: " + path);
  return read_tensor(is);
}

}  // namespace protoprop
