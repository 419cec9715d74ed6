#pragma once

// Random problem instances and small reference solvers shared by the suites.

#include <cmath>
#include <limits>
#include <random>
#include <vector>

#include "cdl/linops.hpp"

namespace cdl::testing {

inline Dictionary random_dictionary(std::size_t K, std::size_t kf, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  std::vector<double> f(K * kf * kf);
  for (double& v : f) v = g(rng);
  for (std::size_t k = 0; k < K; ++k) {
    double n = 0;
    for (std::size_t i = 0; i < kf * kf; ++i) n += f[k * kf * kf + i] * f[k * kf * kf + i];
    for (std::size_t i = 0; i < kf * kf; ++i) f[k * kf * kf + i] /= std::sqrt(n);
  }
  return Dictionary(K, kf, std::move(f));
}

inline LowResMask random_symmetric_mask(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  std::vector<std::uint8_t> bits(h * w, 0);
  std::bernoulli_distribution coin(0.5);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t my = (h - y) % h, mx = (w - x) % w;
      if (y * w + x <= my * w + mx) bits[y * w + x] = bits[my * w + mx] = coin(rng);
    }
  return LowResMask(h, w, bits);
}

/// argmin_z 1/2 (z - v)^2 + tau |z| by grid search: a 2001-point grid over a
/// bracket, re-centred on the best point with a 100x finer grid until the
/// spacing drops below 1e-9. The objective is convex, so refinement is safe.
inline double grid_search_prox(double v, double tau) {
  double lo = -std::abs(v) - 1.0, hi = std::abs(v) + 1.0;
  double best_z = 0.0;
  for (;;) {
    const double step = (hi - lo) / 2000.0;
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i <= 2000; ++i) {
      const double z = lo + step * i;
      const double f = 0.5 * (z - v) * (z - v) + tau * std::abs(z);
      if (f < best) {
        best = f;
        best_z = z;
      }
    }
    // Exact zero is a grid point of interest; the kink is where the minimum often sits.
    if (0.5 * v * v <= best) best_z = 0.0;
    if (step < 1e-9) return best_z;
    lo = best_z - 10.0 * step;
    hi = best_z + 10.0 * step;
  }
}

}  // namespace cdl::testing
