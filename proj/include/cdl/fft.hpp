#pragma once

// In-place complex DFT: iterative radix-2 for powers of two, Bluestein's
// chirp-z otherwise. Unnormalized; callers apply their own scaling.

#include <cmath>
#include <complex>
#include <cstddef>
#include <map>
#include <memory>
#include <numbers>
#include <span>
#include <vector>

#include "cdl/errors.hpp"

namespace cdl::fft {

using cplx = std::complex<double>;

inline bool is_pow2(std::size_t n) { return n && !(n & (n - 1)); }

class Plan {
 public:
  explicit Plan(std::size_t n) : n_(n) {
    if (n == 0) throw ValueError("fft: zero length");
    if (is_pow2(n)) {
      init_radix2(n, bitrev_, twiddle_);
      return;
    }
    m_ = 1;
    while (m_ < 2 * n - 1) m_ <<= 1;
    init_radix2(m_, bitrev_, twiddle_);
    chirp_.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
      // k^2 mod 2n keeps the angle argument small for large k.
      const std::size_t k2 = (k * k) % (2 * n);
      const double ang = std::numbers::pi * static_cast<double>(k2) / static_cast<double>(n);
      chirp_[k] = cplx(std::cos(ang), -std::sin(ang));
    }
    chirp_hat_.assign(m_, cplx{});
    chirp_hat_[0] = std::conj(chirp_[0]);
    for (std::size_t k = 1; k < n; ++k) chirp_hat_[k] = chirp_hat_[m_ - k] = std::conj(chirp_[k]);
    radix2(chirp_hat_, false);
  }

  std::size_t size() const noexcept { return n_; }

  /// inverse=true computes sum_k x_k e^{+2 pi i jk/n} (no 1/n).
  void execute(std::span<cplx> x, bool inverse) const {
    if (x.size() != n_) throw ShapeError("fft length", "plan for " + std::to_string(n_));
    if (m_ == 0) {
      radix2(x, inverse);
      return;
    }
    if (inverse) {
      for (auto& v : x) v = std::conj(v);
    }
    std::vector<cplx> a(m_, cplx{});
    for (std::size_t k = 0; k < n_; ++k) a[k] = x[k] * chirp_[k];
    radix2(a, false);
    for (std::size_t k = 0; k < m_; ++k) a[k] *= chirp_hat_[k];
    radix2(a, true);
    const double inv_m = 1.0 / static_cast<double>(m_);
    for (std::size_t k = 0; k < n_; ++k) x[k] = a[k] * inv_m * chirp_[k];
    if (inverse) {
      for (auto& v : x) v = std::conj(v);
    }
  }

 private:
  static void init_radix2(std::size_t n, std::vector<std::size_t>& bitrev, std::vector<cplx>& tw) {
    bitrev.resize(n);
    std::size_t bits = 0;
    while ((std::size_t{1} << bits) < n) ++bits;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t r = 0;
      for (std::size_t b = 0; b < bits; ++b) r |= ((i >> b) & 1) << (bits - 1 - b);
      bitrev[i] = r;
    }
    tw.resize(n / 2);
    for (std::size_t k = 0; k < n / 2; ++k) {
      const double ang = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
      tw[k] = cplx(std::cos(ang), std::sin(ang));
    }
  }

  void radix2(std::span<cplx> x, bool inverse) const {
    const std::size_t n = x.size();
    for (std::size_t i = 0; i < n; ++i) {
      if (i < bitrev_[i]) std::swap(x[i], x[bitrev_[i]]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
      const std::size_t half = len / 2, step = n / len;
      for (std::size_t i = 0; i < n; i += len) {
        for (std::size_t j = 0; j < half; ++j) {
          const cplx w = inverse ? std::conj(twiddle_[j * step]) : twiddle_[j * step];
          const cplx u = x[i + j], v = x[i + j + half] * w;
          x[i + j] = u + v;
          x[i + j + half] = u - v;
        }
      }
    }
  }

  std::size_t n_;
  std::size_t m_ = 0;  // Bluestein padded length, 0 for radix-2
  std::vector<std::size_t> bitrev_;
  std::vector<cplx> twiddle_;
  std::vector<cplx> chirp_, chirp_hat_;
};

inline std::shared_ptr<const Plan> plan_for(std::size_t n) {
  thread_local std::map<std::size_t, std::shared_ptr<const Plan>> cache;
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  auto p = std::make_shared<const Plan>(n);
  cache.emplace(n, p);
  return p;
}

/// Unitary 2D DFT (1/sqrt(HW) scaling) over split real/imaginary planes, in place.
inline void fft2_unitary(std::span<double> re, std::span<double> im, std::size_t h, std::size_t w, bool inverse) {
  if (re.size() != h * w || im.size() != h * w) throw ShapeError("plane", "fft2 plane size mismatch");
  const auto row_plan = plan_for(w);
  const auto col_plan = plan_for(h);
  std::vector<cplx> buf(std::max(h, w));
  for (std::size_t y = 0; y < h; ++y) {
    std::span<cplx> row(buf.data(), w);
    for (std::size_t x = 0; x < w; ++x) row[x] = cplx(re[y * w + x], im[y * w + x]);
    row_plan->execute(row, inverse);
    for (std::size_t x = 0; x < w; ++x) {
      re[y * w + x] = row[x].real();
      im[y * w + x] = row[x].imag();
    }
  }
  const double s = 1.0 / std::sqrt(static_cast<double>(h * w));
  for (std::size_t x = 0; x < w; ++x) {
    std::span<cplx> col(buf.data(), h);
    for (std::size_t y = 0; y < h; ++y) col[y] = cplx(re[y * w + x], im[y * w + x]);
    col_plan->execute(col, inverse);
    for (std::size_t y = 0; y < h; ++y) {
      re[y * w + x] = col[y].real() * s;
      im[y * w + x] = col[y].imag() * s;
    }
  }
}

}  // namespace cdl::fft
