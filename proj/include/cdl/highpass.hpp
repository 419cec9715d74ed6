#pragma once

// Tikhonov-gradient high-pass split X_0 = X_low + X_high, solved exactly as a
// Fourier multiplier using periodic forward differences for the gradient.

#include <cmath>
#include <numbers>
#include <utility>

#include "cdl/linops.hpp"

namespace cdl {

struct HighpassConfig {
  double beta = 0.25;
};

struct HighpassSplit {
  ComplexImage low;
  ComplexImage high;
};

/// |gamma(f)|^2: eigenvalue of grad^T grad at frequency (fy, fx).
inline double gradient_symbol(std::size_t fy, std::size_t fx, std::size_t h, std::size_t w) {
  const double sy = std::sin(std::numbers::pi * static_cast<double>(fy) / static_cast<double>(h));
  const double sx = std::sin(std::numbers::pi * static_cast<double>(fx) / static_cast<double>(w));
  return 4.0 * (sy * sy + sx * sx);
}

/// argmin_X 1/2 ||X - X_0||^2 + beta/2 ||grad X||^2
inline Tensor lowpass(const Tensor& x0, double beta) {
  if (!(beta >= 0.0)) throw ValueError("highpass: beta must be nonnegative");
  if (x0.rank() != 3 || x0.dim(0) != 2) throw ShapeError("channels", "lowpass needs [2,H,W]");
  if (beta == 0.0) return x0;
  const std::size_t h = x0.dim(1), w = x0.dim(2), n = h * w;
  Tensor t = x0;
  fft::fft2_unitary(std::span<double>(t.data.data(), n), std::span<double>(t.data.data() + n, n), h, w, false);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double m = 1.0 / (1.0 + beta * gradient_symbol(y, x, h, w));
      t[y * w + x] *= m;
      t[n + y * w + x] *= m;
    }
  fft::fft2_unitary(std::span<double>(t.data.data(), n), std::span<double>(t.data.data() + n, n), h, w, true);
  return t;
}

inline HighpassSplit split(const ComplexImage& x0, const HighpassConfig& cfg) {
  Tensor low = lowpass(x0.tensor(), cfg.beta);
  Tensor high = x0.tensor();
  for (std::size_t i = 0; i < high.size(); ++i) high[i] -= low[i];
  return {ComplexImage(std::move(low)), ComplexImage(std::move(high))};
}

/// Y' = Y - A X_low
inline KSpace residual_data(const KSpace& y, const ComplexImage& x_low, const LowResMask& mask) {
  if (y.height() != x_low.height() || y.width() != x_low.width()) {
    throw ShapeError("H/W", "k-space and low-pass image differ in size");
  }
  Tensor r = y.tensor();
  const Tensor ax = forward_A(x_low.tensor(), mask);
  for (std::size_t i = 0; i < r.size(); ++i) r[i] -= ax[i];
  return KSpace(std::move(r));
}

}  // namespace cdl
