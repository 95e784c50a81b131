#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "clca/errors.hpp"

namespace clca::io {

// Little-endian primitive encoding, independent of host byte order.

template <typename U>
void write_le(std::ostream& os, U v) {
  static_assert(std::is_unsigned_v<U>);
  std::array<char, sizeof(U)> buf;
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(buf.data(), buf.size());
}

template <typename U>
U read_le(std::istream& is, const char* what) {
  static_assert(std::is_unsigned_v<U>);
  std::array<unsigned char, sizeof(U)> buf;
  if (!is.read(reinterpret_cast<char*>(buf.data()), buf.size())) {
    throw FormatError(std::string("truncated file while reading ") + what);
  }
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

inline void write_f32(std::ostream& os, float f) { write_le<std::uint32_t>(os, std::bit_cast<std::uint32_t>(f)); }

inline float read_f32(std::istream& is, const char* what) {
  return std::bit_cast<float>(read_le<std::uint32_t>(is, what));
}

inline void write_f32_array(std::ostream& os, const float* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  } else {
    for (std::size_t i = 0; i < n; ++i) write_f32(os, data[i]);
  }
}

inline void read_f32_array(std::istream& is, float* data, std::size_t n, const char* what) {
  if constexpr (std::endian::native == std::endian::little) {
    if (!is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * sizeof(float)))) {
      throw FormatError(std::string("truncated file while reading ") + what);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) data[i] = read_f32(is, what);
  }
}

inline void write_bytes(std::ostream& os, const std::string& s) { os.write(s.data(), static_cast<std::streamsize>(s.size())); }

inline std::string read_bytes(std::istream& is, std::size_t n, const char* what) {
  std::string s(n, '\0');
  if (n && !is.read(s.data(), static_cast<std::streamsize>(n))) {
    throw FormatError(std::string("truncated file while reading ") + what);
  }
  return s;
}

inline void expect_magic(std::istream& is, const char (&magic)[5]) {
  const std::string got = read_bytes(is, 4, "magic");
  if (got != std::string(magic, 4)) throw FormatError("bad magic: expected '" + std::string(magic, 4) + "'");
}

}  // namespace clca::io
