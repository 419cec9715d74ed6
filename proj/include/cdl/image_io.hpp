#pragma once

// Binary image and k-space files, plus 8-bit PGM magnitude export.
//   CIMG: "CIMG" | u32 h | u32 w | f64 Re plane | f64 Im plane
//   CKSP: "CKSP" | u32 h | u32 w | h*w u8 mask bits | f64 Re plane | f64 Im plane

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>

#include "cdl/data_metrics.hpp"
#include "cdl/detail/binary_io.hpp"
#include "cdl/linops.hpp"

namespace cdl {

namespace detail {

inline void write_planes(std::ostream& os, const Tensor& t) {
  for (double v : t.data) write_f64(os, v);
}

inline Tensor read_planes(std::istream& is, std::size_t h, std::size_t w) {
  Tensor t(Shape{2, h, w});
  for (double& v : t.data) v = read_f64(is);
  return t;
}

inline std::pair<std::size_t, std::size_t> read_dims(std::istream& is) {
  const std::uint32_t h = read_u32(is), w = read_u32(is);
  if (h == 0 || w == 0 || h > 1024 || w > 1024) throw IoError("image dimensions out of range");
  return {h, w};
}

template <class F>
void with_output(const std::filesystem::path& path, F&& f) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  f(os);
  if (!os) throw IoError("failed writing '" + path.string() + "'");
}

template <class F>
auto with_input(const std::filesystem::path& path, F&& f) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  try {
    return f(is);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace detail

inline void write_image(std::ostream& os, const ComplexImage& x) {
  detail::write_magic(os, "CIMG");
  detail::write_u32(os, static_cast<std::uint32_t>(x.height()));
  detail::write_u32(os, static_cast<std::uint32_t>(x.width()));
  detail::write_planes(os, x.tensor());
}

inline ComplexImage read_image(std::istream& is) {
  detail::expect_magic(is, "CIMG");
  const auto [h, w] = detail::read_dims(is);
  return ComplexImage(detail::read_planes(is, h, w));
}

inline void write_kspace(std::ostream& os, const KSpace& y, const LowResMask& mask) {
  if (y.height() != mask.height() || y.width() != mask.width()) throw ShapeError("H/W", "k-space and mask differ");
  detail::write_magic(os, "CKSP");
  detail::write_u32(os, static_cast<std::uint32_t>(y.height()));
  detail::write_u32(os, static_cast<std::uint32_t>(y.width()));
  for (std::uint8_t b : mask.bits()) detail::write_u8(os, b);
  detail::write_planes(os, y.tensor());
}

struct MaskedKSpace {
  KSpace y;
  LowResMask mask;
};

inline MaskedKSpace read_kspace(std::istream& is) {
  detail::expect_magic(is, "CKSP");
  const auto [h, w] = detail::read_dims(is);
  std::vector<std::uint8_t> bits(h * w);
  for (auto& b : bits) {
    b = detail::read_u8(is);
    if (b > 1) throw IoError("mask bits must be 0 or 1");
  }
  LowResMask mask;
  try {
    mask = LowResMask(h, w, std::move(bits));
  } catch (const Error& e) {
    throw IoError(std::string("stored mask is invalid: ") + e.what());
  }
  return {KSpace(detail::read_planes(is, h, w)), std::move(mask)};
}

inline void save_image(const std::filesystem::path& p, const ComplexImage& x) {
  detail::with_output(p, [&](std::ostream& os) { write_image(os, x); });
}

inline ComplexImage load_image(const std::filesystem::path& p) {
  return detail::with_input(p, [](std::istream& is) { return read_image(is); });
}

inline void save_kspace(const std::filesystem::path& p, const KSpace& y, const LowResMask& mask) {
  detail::with_output(p, [&](std::ostream& os) { write_kspace(os, y, mask); });
}

inline MaskedKSpace load_kspace(const std::filesystem::path& p) {
  return detail::with_input(p, [](std::istream& is) { return read_kspace(is); });
}

/// Binary PGM of |x|, scaled so the peak maps to 255.
inline void save_pgm(const std::filesystem::path& p, const ComplexImage& x) {
  const auto mag = magnitude(x);
  const double peak = *std::max_element(mag.begin(), mag.end());
  detail::with_output(p, [&](std::ostream& os) {
    os << "P5\n" << x.width() << ' ' << x.height() << "\n255\n";
    for (double v : mag) {
      const double s = peak > 0.0 ? std::round(255.0 * v / peak) : 0.0;
      os.put(static_cast<char>(static_cast<unsigned char>(std::clamp(s, 0.0, 255.0))));
    }
  });
}

}  // namespace cdl
