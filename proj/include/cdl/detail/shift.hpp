#pragma once

#include <algorithm>
#include <cstddef>

namespace cdl {

enum class Padding { zero, circular };

namespace detail {

inline long wrap(long i, long n) {
  long r = i % n;
  return r < 0 ? r + n : r;
}

// dst[y, x] += c * src[y + dy, x + dx] over an H x W plane.
inline void shift_axpy(double c, const double* src, double* dst, long h, long w, long dy, long dx,
                       Padding pad) {
  if (c == 0.0) return;
  if (pad == Padding::zero) {
    const long y0 = std::max(0L, -dy), y1 = std::min(h, h - dy);
    const long x0 = std::max(0L, -dx), x1 = std::min(w, w - dx);
    for (long y = y0; y < y1; ++y) {
      const double* s = src + (y + dy) * w + dx;
      double* d = dst + y * w;
      for (long x = x0; x < x1; ++x) d[x] += c * s[x];
    }
    return;
  }
  const long sx = wrap(dx, w);
  for (long y = 0; y < h; ++y) {
    const double* s = src + wrap(y + dy, h) * w;
    double* d = dst + y * w;
    const long split = w - sx;
    for (long x = 0; x < split; ++x) d[x] += c * s[x + sx];
    for (long x = split; x < w; ++x) d[x] += c * s[x + sx - w];
  }
}

// sum_{y,x} a[y, x] * b[y + dy, x + dx]
inline double shift_dot(const double* a, const double* b, long h, long w, long dy, long dx, Padding pad) {
  double acc = 0.0;
  if (pad == Padding::zero) {
    const long y0 = std::max(0L, -dy), y1 = std::min(h, h - dy);
    const long x0 = std::max(0L, -dx), x1 = std::min(w, w - dx);
    for (long y = y0; y < y1; ++y) {
      const double* s = b + (y + dy) * w + dx;
      const double* r = a + y * w;
      for (long x = x0; x < x1; ++x) acc += r[x] * s[x];
    }
    return acc;
  }
  const long sx = wrap(dx, w);
  for (long y = 0; y < h; ++y) {
    const double* s = b + wrap(y + dy, h) * w;
    const double* r = a + y * w;
    const long split = w - sx;
    for (long x = 0; x < split; ++x) acc += r[x] * s[x + sx];
    for (long x = split; x < w; ++x) acc += r[x] * s[x + sx - w];
  }
  return acc;
}

}  // namespace detail
}  // namespace cdl
