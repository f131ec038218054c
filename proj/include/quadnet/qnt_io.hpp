#pragma once

// QNT1 tensor container:
//   bytes 0..3   "QNT1"
//   u8           dtype code (0 = f32, 1 = f64)
//   u32          ndim
//   u32[ndim]    extents
//   payload      row-major values
// All integers and values little-endian.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>

#include "quadnet/tensor.hpp"

namespace quadnet {

static_assert(std::endian::native == std::endian::little, "QNT1 I/O assumes a little-endian host");

namespace qnt {

inline constexpr char kMagic[4] = {'Q', 'N', 'T', '1'};

template <class U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <class U>
U get(std::istream& is, const char* what) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(U))) throw Error(std::string("QNT1: truncated ") + what);
  return v;
}

}  // namespace qnt

template <class T>
void write_qnt(std::ostream& os, const Tensor<T>& t) {
  os.write(qnt::kMagic, 4);
  qnt::put<std::uint8_t>(os, static_cast<std::uint8_t>(dtype_of<T>()));
  qnt::put<std::uint32_t>(os, static_cast<std::uint32_t>(t.ndim()));
  for (int e : t.shape()) qnt::put<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  os.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
  if (!os) throw Error("QNT1: write failed");
}

// Reads a tensor stored in either dtype, converting to T.
template <class T>
Tensor<T> read_qnt(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, qnt::kMagic, 4) != 0) throw Error("QNT1: bad magic");
  const auto code = qnt::get<std::uint8_t>(is, "dtype");
  if (code > 1) throw Error("QNT1: unknown dtype code " + std::to_string(code));
  const auto ndim = qnt::get<std::uint32_t>(is, "ndim");
  if (ndim > 16) throw Error("QNT1: implausible ndim " + std::to_string(ndim));
  Shape shape(ndim);
  for (auto& e : shape) {
    const auto v = qnt::get<std::uint32_t>(is, "extent");
    if (v > static_cast<std::uint32_t>(std::numeric_limits<int>::max())) throw Error("QNT1: extent too large");
    e = static_cast<int>(v);
  }
  const std::size_t n = numel(shape);
  std::vector<T> values(n);
  auto read_as = [&]<class U>(U) {
    std::vector<U> raw(n);
    if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * sizeof(U)))) {
      throw Error("QNT1: truncated payload");
    }
    for (std::size_t i = 0; i < n; ++i) values[i] = static_cast<T>(raw[i]);
  };
  if (code == 0) {
    read_as(float{});
  } else {
    read_as(double{});
  }
  return Tensor<T>(std::move(shape), std::move(values));
}

template <class T>
void save_qnt(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  write_qnt(os, t);
}

template <class T>
Tensor<T> load_qnt(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  return read_qnt<T>(is);
}

}  // namespace quadnet
