#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>

#include "exitrec/errors.hpp"

namespace exitrec::binio {

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian; big-endian hosts need byte swapping");

template <typename T>
void write_pod(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const char* what) {
  T value{};
  if (!is.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw DataError(std::string("unexpected end of file while reading ") + what);
  }
  return value;
}

inline void write_doubles(std::ostream& os, std::span<const double> values) {
  os.write(reinterpret_cast<const char*>(values.data()),
           static_cast<std::streamsize>(values.size_bytes()));
}

inline void read_doubles(std::istream& is, std::span<double> out, const char* what) {
  if (!is.read(reinterpret_cast<char*>(out.data()),
               static_cast<std::streamsize>(out.size_bytes()))) {
    throw DataError(std::string("unexpected end of file while reading ") + what);
  }
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_pod<std::uint64_t>(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, const char* what) {
  const auto n = read_pod<std::uint64_t>(is, what);
  if (n > (1ULL << 32)) throw DataError(std::string("implausible string length in ") + what);
  std::string s(n, '\0');
  if (n > 0 && !is.read(s.data(), static_cast<std::streamsize>(n))) {
    throw DataError(std::string("unexpected end of file while reading ") + what);
  }
  return s;
}

inline void expect_magic(std::istream& is, const char (&magic)[5], const char* what) {
  char buf[4];
  if (!is.read(buf, 4)) throw DataError(std::string("empty or truncated ") + what);
  if (std::memcmp(buf, magic, 4) != 0) {
    throw DataError(std::string("bad magic in ") + what + ", expected " + magic);
  }
}

}  // namespace exitrec::binio
