#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "cdl/errors.hpp"

namespace cdl::detail {

inline void write_le(std::ostream& os, std::uint64_t v, int bytes) {
  char buf[8];
  for (int i = 0; i < bytes; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(buf, bytes);
}

inline std::uint64_t read_le(std::istream& is, int bytes) {
  unsigned char buf[8];
  if (!is.read(reinterpret_cast<char*>(buf), bytes)) throw IoError("unexpected end of file");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

inline void write_u8(std::ostream& os, std::uint8_t v) { write_le(os, v, 1); }
inline void write_u32(std::ostream& os, std::uint32_t v) { write_le(os, v, 4); }
inline void write_u64(std::ostream& os, std::uint64_t v) { write_le(os, v, 8); }
inline void write_f64(std::ostream& os, double v) { write_le(os, std::bit_cast<std::uint64_t>(v), 8); }

inline std::uint8_t read_u8(std::istream& is) { return static_cast<std::uint8_t>(read_le(is, 1)); }
inline std::uint32_t read_u32(std::istream& is) { return static_cast<std::uint32_t>(read_le(is, 4)); }
inline std::uint64_t read_u64(std::istream& is) { return read_le(is, 8); }
inline double read_f64(std::istream& is) { return std::bit_cast<double>(read_le(is, 8)); }

inline void write_magic(std::ostream& os, std::string_view magic) { os.write(magic.data(), 4); }

inline void expect_magic(std::istream& is, std::string_view magic) {
  char buf[4];
  if (!is.read(buf, 4) || std::string_view(buf, 4) != magic) {
    throw IoError("bad magic, expected '" + std::string(magic) + "'");
  }
}

// u32 byte length followed by UTF-8 bytes.
inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  const std::uint32_t n = read_u32(is);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw IoError("truncated string payload");
  return s;
}

}  // namespace cdl::detail
