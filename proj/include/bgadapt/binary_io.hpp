#pragma once

// Little-endian primitive readers/writers shared by the dataset and model
// archive formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>

#include "bgadapt/errors.hpp"

namespace bgadapt::binio {

static_assert(std::endian::native == std::endian::little, "archive formats assume a little-endian host");

inline void write_bytes(std::ostream& os, const void* data, std::size_t n) {
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!os) throw IoError("write failed");
}

inline void read_bytes(std::istream& is, void* data, std::size_t n) {
  is.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (is.gcount() != static_cast<std::streamsize>(n)) throw IoError("unexpected end of file");
}

template <typename T>
void write(std::ostream& os, T value) {
  write_bytes(os, &value, sizeof(T));
}

template <typename T>
T read(std::istream& is) {
  T value{};
  read_bytes(is, &value, sizeof(T));
  return value;
}

inline void write_string(std::ostream& os, const std::string& s) {
  write<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  write_bytes(os, s.data(), s.size());
}

inline std::string read_string(std::istream& is, std::size_t max_len = 1 << 16) {
  const auto n = read<std::uint32_t>(is);
  if (n > max_len) throw IoError("string length " + std::to_string(n) + " exceeds limit");
  std::string s(n, '\0');
  read_bytes(is, s.data(), n);
  return s;
}

inline void write_floats(std::ostream& os, std::span<const float> v) { write_bytes(os, v.data(), v.size_bytes()); }

inline void read_floats(std::istream& is, std::span<float> v) { read_bytes(is, v.data(), v.size_bytes()); }

inline void expect_magic(std::istream& is, const char (&magic)[9]) {
  char buf[8];
  read_bytes(is, buf, 8);
  if (std::memcmp(buf, magic, 8) != 0) throw IoError(std::string("bad magic, expected ") + magic);
}

}  // namespace bgadapt::binio
