#pragma once

// Retrospective k-space simulation, synthetic phantoms, and the evaluation
// metrics: masked MSE, masked SSIM on magnitudes, and the reference-free blur
// metric of Crete et al.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "cdl/linops.hpp"
#include "cdl/rng.hpp"

namespace cdl {

struct NoiseModel {
  double sigma_sq = 0.0;  // total complex variance per retained k-space sample
  std::uint64_t seed = 0;
};

inline constexpr double kSigmaSqModerate = 0.2;
inline constexpr double kSigmaSqHigh = 0.3;

/// y = S F x + e, e complex Gaussian with variance sigma^2/2 per component on retained bins.
inline KSpace simulate(const ComplexImage& x_true, const LowResMask& mask, const NoiseModel& noise) {
  if (!(noise.sigma_sq >= 0.0)) throw ValueError("noise variance must be nonnegative");
  Tensor y = forward_A(x_true.tensor(), mask);
  if (noise.sigma_sq > 0.0) {
    auto rng = SeedStream(noise.seed).engine("kspace_noise");
    std::normal_distribution<double> g(0.0, std::sqrt(noise.sigma_sq / 2.0));
    const std::size_t n = mask.height() * mask.width();
    for (std::size_t i = 0; i < n; ++i) {
      if (!mask.bits()[i]) continue;
      y[i] += g(rng);
      y[n + i] += g(rng);
    }
  }
  return KSpace(std::move(y));
}

// ---------------------------------------------------------------------------
// Phantoms
// ---------------------------------------------------------------------------

enum class PhantomKind { shepp_logan_like, random_blobs, piecewise_smooth };

inline PhantomKind parse_phantom_kind(std::string_view s) {
  if (s == "shepp_logan_like" || s == "shepp-logan") return PhantomKind::shepp_logan_like;
  if (s == "random_blobs" || s == "blobs") return PhantomKind::random_blobs;
  if (s == "piecewise_smooth" || s == "piecewise") return PhantomKind::piecewise_smooth;
  throw ValueError("unknown phantom kind '" + std::string(s) + "'");
}

inline std::string to_string(PhantomKind k) {
  switch (k) {
    case PhantomKind::shepp_logan_like: return "shepp_logan_like";
    case PhantomKind::random_blobs: return "random_blobs";
    case PhantomKind::piecewise_smooth: return "piecewise_smooth";
  }
  return "?";
}

namespace detail {

struct Ellipse {
  double value, a, b, x0, y0, phi_deg;
};

inline void paint_ellipse(std::vector<double>& img, std::size_t h, std::size_t w, const Ellipse& e) {
  const double c = std::cos(e.phi_deg * std::numbers::pi / 180.0);
  const double s = std::sin(e.phi_deg * std::numbers::pi / 180.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      // [-1, 1]^2 image coordinates, y pointing up
      const double px = (2.0 * static_cast<double>(x) + 1.0) / static_cast<double>(w) - 1.0 - e.x0;
      const double py = 1.0 - (2.0 * static_cast<double>(y) + 1.0) / static_cast<double>(h) - e.y0;
      const double u = px * c + py * s, v = -px * s + py * c;
      if ((u * u) / (e.a * e.a) + (v * v) / (e.b * e.b) <= 1.0) img[y * w + x] += e.value;
    }
}

inline void normalize_unit_max(std::vector<double>& img) {
  for (double& v : img) v = std::max(v, 0.0);
  const double m = *std::max_element(img.begin(), img.end());
  if (m > 0.0) {
    for (double& v : img) v /= m;
  }
}

}  // namespace detail

/// Deterministic phantom with magnitude in [0, 1] and a smooth random phase.
/// `blobs` is the blob count for random_blobs and ignored otherwise.
inline ComplexImage phantom(PhantomKind kind, std::size_t h, std::size_t w, std::uint64_t seed,
                            std::size_t blobs = 6) {
  if (h == 0 || w == 0 || h % 2 || w % 2) throw ShapeError("H/W", "phantom sides must be even and nonzero");
  const SeedStream seeds(seed);
  auto rng = seeds.engine("phantom_shape");
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> mag(h * w, 0.0);

  switch (kind) {
    case PhantomKind::shepp_logan_like: {
      // Modified Shepp-Logan ellipses with seeded jitter of position, size and contrast.
      static constexpr std::array<detail::Ellipse, 10> base{{
          {1.0, 0.69, 0.92, 0.0, 0.0, 0.0},
          {-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0},
          {-0.2, 0.11, 0.31, 0.22, 0.0, -18.0},
          {-0.2, 0.16, 0.41, -0.22, 0.0, 18.0},
          {0.1, 0.21, 0.25, 0.0, 0.35, 0.0},
          {0.1, 0.046, 0.046, 0.0, 0.1, 0.0},
          {0.1, 0.046, 0.046, 0.0, -0.1, 0.0},
          {0.1, 0.046, 0.023, -0.08, -0.605, 0.0},
          {0.1, 0.023, 0.023, 0.0, -0.606, 0.0},
          {0.1, 0.023, 0.046, 0.06, -0.605, 0.0},
      }};
      for (std::size_t i = 0; i < base.size(); ++i) {
        detail::Ellipse e = base[i];
        const double j = i < 2 ? 0.02 : 0.08;
        e.a *= 1.0 + j * u(rng);
        e.b *= 1.0 + j * u(rng);
        e.x0 += j * 0.5 * u(rng);
        e.y0 += j * 0.5 * u(rng);
        e.phi_deg += 10.0 * j * u(rng);
        if (i >= 2) e.value *= 1.0 + 0.5 * u(rng);
        detail::paint_ellipse(mag, h, w, e);
      }
      break;
    }
    case PhantomKind::random_blobs: {
      std::uniform_real_distribution<double> radius(0.08, 0.3), amp(0.3, 1.0);
      for (std::size_t b = 0; b < blobs; ++b) {
        const double cx = 0.6 * u(rng), cy = 0.6 * u(rng), r = radius(rng), a = amp(rng);
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            const double px = (2.0 * static_cast<double>(x) + 1.0) / static_cast<double>(w) - 1.0 - cx;
            const double py = (2.0 * static_cast<double>(y) + 1.0) / static_cast<double>(h) - 1.0 - cy;
            mag[y * w + x] += a * std::exp(-(px * px + py * py) / (2.0 * r * r));
          }
      }
      break;
    }
    case PhantomKind::piecewise_smooth: {
      // Outer support with a smooth ramp, plus inner regions of distinct smooth intensity.
      std::vector<double> region(h * w);
      const double gx = 0.2 * u(rng), gy = 0.2 * u(rng);
      const auto add_region = [&](const detail::Ellipse& e, double slope_x, double slope_y) {
        std::fill(region.begin(), region.end(), 0.0);
        detail::paint_ellipse(region, h, w, {1.0, e.a, e.b, e.x0, e.y0, e.phi_deg});
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            if (region[y * w + x] == 0.0) continue;
            const double px = (2.0 * static_cast<double>(x) + 1.0) / static_cast<double>(w) - 1.0;
            const double py = (2.0 * static_cast<double>(y) + 1.0) / static_cast<double>(h) - 1.0;
            mag[y * w + x] += e.value * (1.0 + slope_x * px + slope_y * py);
          }
      };
      add_region({0.45, 0.75 + 0.1 * u(rng), 0.85 + 0.1 * u(rng), 0.0, 0.0, 15.0 * u(rng)}, gx, gy);
      std::uniform_real_distribution<double> size(0.06, 0.25), level(-0.4, 0.6);
      for (int r = 0; r < 12; ++r) {
        add_region({level(rng), size(rng), size(rng), 0.45 * u(rng), 0.45 * u(rng), 90.0 * u(rng)}, 0.3 * u(rng),
                   0.3 * u(rng));
      }
      break;
    }
  }
  detail::normalize_unit_max(mag);

  auto prng = seeds.engine("phantom_phase");
  std::uniform_real_distribution<double> c(-0.5, 0.5);
  const double c0 = std::numbers::pi * c(prng), cy = c(prng), cx = c(prng), cyy = 0.5 * c(prng), cxx = 0.5 * c(prng),
               cxy = 0.5 * c(prng);
  ComplexImage img(h, w);
  auto re = img.re();
  auto im = img.im();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double py = 2.0 * static_cast<double>(y) / static_cast<double>(h) - 1.0;
      const double px = 2.0 * static_cast<double>(x) / static_cast<double>(w) - 1.0;
      const double phase = c0 + cy * py + cx * px + cyy * py * py + cxx * px * px + cxy * px * py;
      re[y * w + x] = mag[y * w + x] * std::cos(phase);
      im[y * w + x] = mag[y * w + x] * std::sin(phase);
    }
  return img;
}

inline std::vector<double> magnitude(const ComplexImage& x) {
  std::vector<double> m(x.pixels());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = std::hypot(x.re()[i], x.im()[i]);
  return m;
}

// ---------------------------------------------------------------------------
// Evaluation mask
// ---------------------------------------------------------------------------

struct EvalMask {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> fg;

  static EvalMask all(std::size_t h, std::size_t w) { return {h, w, std::vector<std::uint8_t>(h * w, 1)}; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(fg.begin(), fg.end(), 1)); }
};

namespace detail {

// 3x3 binary dilation (outside counts as background) or erosion (outside counts as foreground).
inline std::vector<std::uint8_t> morph3(const std::vector<std::uint8_t>& in, std::size_t h, std::size_t w,
                                        bool dilate) {
  std::vector<std::uint8_t> out(in.size());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      bool acc = !dilate;
      for (long dy = -1; dy <= 1; ++dy)
        for (long dx = -1; dx <= 1; ++dx) {
          const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
          const bool inside = yy >= 0 && xx >= 0 && yy < static_cast<long>(h) && xx < static_cast<long>(w);
          const bool v = inside ? in[yy * w + xx] != 0 : !dilate;
          acc = dilate ? (acc || v) : (acc && v);
        }
      out[y * w + x] = acc;
    }
  return out;
}

}  // namespace detail

/// Foreground = |ref| >= frac * max|ref|, followed by one 3x3 morphological closing.
inline EvalMask eval_mask_from(const ComplexImage& ref, double threshold_frac) {
  if (!(threshold_frac >= 0.0 && threshold_frac <= 1.0)) throw ValueError("mask threshold must lie in [0, 1]");
  const auto mag = magnitude(ref);
  const double peak = *std::max_element(mag.begin(), mag.end());
  if (!(peak > 0.0)) throw ValueError("evaluation mask: reference image is zero, foreground is empty");
  EvalMask m{ref.height(), ref.width(), std::vector<std::uint8_t>(mag.size())};
  for (std::size_t i = 0; i < mag.size(); ++i) m.fg[i] = mag[i] >= threshold_frac * peak;
  m.fg = detail::morph3(detail::morph3(m.fg, m.height, m.width, true), m.height, m.width, false);
  return m;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

namespace detail {

inline void check_same(const ComplexImage& a, const ComplexImage& b, const EvalMask& m) {
  if (a.height() != b.height()) throw ShapeError("H", "metric inputs differ in height");
  if (a.width() != b.width()) throw ShapeError("W", "metric inputs differ in width");
  if (m.height != a.height() || m.width != a.width()) throw ShapeError("mask", "evaluation mask size differs");
  if (m.count() == 0) throw ValueError("evaluation mask is empty");
}

// Half-sample symmetric extension: d c b a | a b c d | d c b a
inline std::size_t reflect_index(long i, long n) {
  const long period = 2 * n;
  long r = i % period;
  if (r < 0) r += period;
  return static_cast<std::size_t>(r < n ? r : period - 1 - r);
}

// Separable correlation of an h x w image with a symmetric 1D kernel, reflect boundary.
inline std::vector<double> filter_separable(const std::vector<double>& img, std::size_t h, std::size_t w,
                                            const std::vector<double>& kernel) {
  const long r = static_cast<long>(kernel.size() / 2);
  std::vector<double> tmp(img.size()), out(img.size());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (long t = -r; t <= r; ++t)
        acc += kernel[t + r] * img[y * w + reflect_index(static_cast<long>(x) + t, static_cast<long>(w))];
      tmp[y * w + x] = acc;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (long t = -r; t <= r; ++t)
        acc += kernel[t + r] * tmp[reflect_index(static_cast<long>(y) + t, static_cast<long>(h)) * w + x];
      out[y * w + x] = acc;
    }
  return out;
}

inline std::vector<double> gaussian_kernel(std::size_t size, double sigma) {
  std::vector<double> k(size);
  const double c = static_cast<double>(size / 2);
  double s = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - c;
    s += k[i] = std::exp(-d * d / (2.0 * sigma * sigma));
  }
  for (double& v : k) v /= s;
  return k;
}

}  // namespace detail

/// Mean squared complex deviation over foreground pixels.
inline double mse(const ComplexImage& x, const ComplexImage& ref, const EvalMask& m) {
  detail::check_same(x, ref, m);
  double s = 0.0;
  for (std::size_t i = 0; i < x.pixels(); ++i) {
    if (!m.fg[i]) continue;
    const double dr = x.re()[i] - ref.re()[i], di = x.im()[i] - ref.im()[i];
    s += dr * dr + di * di;
  }
  return s / static_cast<double>(m.count());
}

struct SsimParams {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

/// Gaussian-window SSIM of |x| against |ref|, averaged over windows centred in the mask.
/// Dynamic range is the spread of |ref| over the foreground.
inline double ssim(const ComplexImage& x, const ComplexImage& ref, const EvalMask& m, const SsimParams& p = {}) {
  detail::check_same(x, ref, m);
  const std::size_t h = x.height(), w = x.width(), n = h * w;
  const auto a = magnitude(x), b = magnitude(ref);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (std::size_t i = 0; i < n; ++i) {
    if (!m.fg[i]) continue;
    lo = std::min(lo, b[i]);
    hi = std::max(hi, b[i]);
  }
  const double range = hi > lo ? hi - lo : 1.0;
  const double c1 = (p.k1 * range) * (p.k1 * range), c2 = (p.k2 * range) * (p.k2 * range);

  std::vector<double> aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const auto k = detail::gaussian_kernel(p.window, p.sigma);
  const auto mu_a = detail::filter_separable(a, h, w, k), mu_b = detail::filter_separable(b, h, w, k);
  const auto e_aa = detail::filter_separable(aa, h, w, k), e_bb = detail::filter_separable(bb, h, w, k);
  const auto e_ab = detail::filter_separable(ab, h, w, k);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!m.fg[i]) continue;
    const double va = e_aa[i] - mu_a[i] * mu_a[i], vb = e_bb[i] - mu_b[i] * mu_b[i];
    const double cov = e_ab[i] - mu_a[i] * mu_b[i];
    const double num = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2);
    const double den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2);
    total += num / den;
  }
  return total / static_cast<double>(m.count());
}

/// Reference-free blur metric (Crete et al.) on a magnitude image, in [0, 1],
/// higher is blurrier. Directions without any variation score 1.
inline double blur_metric(const std::vector<double>& img, std::size_t h, std::size_t w, std::size_t box = 9) {
  if (img.size() != h * w) throw ShapeError("pixels", "blur_metric buffer does not match size");
  if (h < 4 || w < 4) throw ShapeError("H/W", "blur_metric needs at least 4x4 pixels");
  const long r = static_cast<long>(box / 2);
  double score = 0.0;
  for (int axis = 0; axis < 2; ++axis) {
    std::vector<double> blurred(img.size());
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (long t = -r; t <= r; ++t) {
          acc += axis == 0 ? img[detail::reflect_index(static_cast<long>(y) + t, static_cast<long>(h)) * w + x]
                           : img[y * w + detail::reflect_index(static_cast<long>(x) + t, static_cast<long>(w))];
        }
        blurred[y * w + x] = acc / static_cast<double>(box);
      }
    // Differences along `axis`, accumulated over the interior [2, n-1) of both axes.
    double m1 = 0.0, m2 = 0.0;
    const std::size_t dh = axis == 0 ? h - 1 : h, dw = axis == 0 ? w : w - 1;
    const std::size_t step = axis == 0 ? w : 1;
    for (std::size_t y = 2; y < std::min(dh, h - 1); ++y)
      for (std::size_t x = 2; x < std::min(dw, w - 1); ++x) {
        const std::size_t i = y * w + x;
        const double sharp = std::abs(img[i + step] - img[i]);
        const double soft = std::abs(blurred[i + step] - blurred[i]);
        m1 += sharp;
        m2 += std::max(0.0, sharp - soft);
      }
    score = std::max(score, m1 > 0.0 ? std::abs(m1 - m2) / m1 : 1.0);
  }
  return score;
}

inline double blur_metric(const ComplexImage& x) { return blur_metric(magnitude(x), x.height(), x.width()); }

}  // namespace cdl
