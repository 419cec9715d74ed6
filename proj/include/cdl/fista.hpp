#pragma once

// Unrolled FISTA for
//   min_s 1/2 ||A D s - Y'||^2 + sum_k ||Lambda_k s_k||_1
// with Chambolle-Dossal momentum. Iterations are expressed as autodiff ops so
// the same code runs untracked, fully tracked, or with a truncated tracked tail.

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>

#include "cdl/autodiff.hpp"
#include "cdl/linops.hpp"

namespace cdl {

/// K strictly positive maps [K,H,W], shared by the real and imaginary parts.
struct LambdaMaps {
  Tensor maps;

  LambdaMaps() = default;
  explicit LambdaMaps(Tensor t) : maps(std::move(t)) {
    if (maps.rank() != 3) throw ShapeError("rank", "lambda maps need [K,H,W], got " + shape_str(maps.shape));
    validate();
  }
  static LambdaMaps uniform(std::size_t K, std::size_t h, std::size_t w, double value) {
    return LambdaMaps(Tensor(Shape{K, h, w}, value));
  }
  std::size_t K() const { return maps.dim(0); }

  void validate() const {
    for (double v : maps.data) {
      if (!(v > 0.0) || !std::isfinite(v)) throw ValueError("lambda maps must be strictly positive and finite");
    }
  }
};

enum class Tracking {
  none,       // every iteration untracked
  full,       // every iteration on the tape
  truncated,  // first T - T_grad iterations untracked, the last T_grad tracked
};

struct FistaConfig {
  std::size_t T = 20;
  std::size_t T_grad = 8;
  double step = 0.0;  // <= 0: derive 1/L from power iteration
  double step_safety = 0.95;
  std::size_t power_iters = 50;
  std::uint64_t power_seed = 0;
  double momentum_a = 3.0;
  bool check_divergence = true;

  void validate() const {
    if (T == 0) throw ValueError("fista: T must be at least 1");
    if (T_grad < 1 || T_grad > T) throw ValueError("fista: need 1 <= T_grad <= T");
    if (!(momentum_a > 2.0)) throw ValueError("fista: momentum parameter must exceed 2");
    if (step < 0.0) throw ValueError("fista: negative step");
  }
};

inline double fista_step(const Dictionary& d, const LowResMask& mask, const FistaConfig& cfg) {
  if (cfg.step > 0.0) return cfg.step;
  const double L = operator_norm_sq(d, mask, cfg.power_iters, cfg.power_seed);
  if (!(L > 0.0)) throw NumericalError("fista: operator norm is zero, no valid step size");
  return cfg.step_safety / L;
}

/// Soft-thresholds Re and Im parts independently with threshold step * Lambda_k(p).
inline Tensor weighted_l1_prox(const Tensor& s, const LambdaMaps& lambda, double step) {
  if (!(step > 0.0)) throw ValueError("prox: step must be positive");
  lambda.validate();
  if (s.rank() != 4 || s.dim(1) != 2) throw ShapeError("channels", "prox needs [K,2,H,W]");
  const Tensor& lm = lambda.maps;
  if (lm.dim(0) != s.dim(0)) throw ShapeError("K", "lambda maps and coefficients differ in K");
  if (lm.dim(1) != s.dim(2) || lm.dim(2) != s.dim(3)) throw ShapeError("H/W", "lambda maps and coefficients differ");
  const std::size_t plane = s.dim(2) * s.dim(3);
  Tensor out(s.shape);
  for (std::size_t k = 0; k < s.dim(0); ++k)
    for (std::size_t ch = 0; ch < 2; ++ch)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t i = (k * 2 + ch) * plane + p;
        out[i] = ad::soft_threshold(s[i], step * lm[k * plane + p]);
      }
  return out;
}

/// 1/2 ||B s - Y'||^2 + sum_k sum_p Lambda_k(p) (|Re s_k(p)| + |Im s_k(p)|). Lambda >= 0 allowed.
inline double objective(const Tensor& s, const LowResMask& mask, const Dictionary& d, const KSpace& y_prime,
                        const Tensor& lambda) {
  const Tensor bs = apply_B(s, d, mask);
  const Tensor& y = y_prime.tensor();
  if (bs.shape != y.shape) throw ShapeError("H/W", "objective: data and coefficients differ in size");
  double data = 0.0;
  for (std::size_t i = 0; i < bs.size(); ++i) {
    const double r = bs[i] - y[i];
    data += r * r;
  }
  const std::size_t plane = s.dim(2) * s.dim(3);
  if (lambda.shape != Shape{s.dim(0), s.dim(2), s.dim(3)}) throw ShapeError("lambda", "objective: lambda shape");
  double reg = 0.0;
  for (std::size_t k = 0; k < s.dim(0); ++k)
    for (std::size_t p = 0; p < plane; ++p) {
      const double a = std::abs(s[(k * 2) * plane + p]) + std::abs(s[(k * 2 + 1) * plane + p]);
      reg += lambda[k * plane + p] * a;
    }
  return 0.5 * data + reg;
}

/// Runs cfg.T FISTA iterations from s0 with an explicit step size.
inline ad::Var fista_solve(const ad::Var& s0, const LowResMask& mask, const Dictionary& d, const KSpace& y_prime,
                           const ad::Var& lambda, const FistaConfig& cfg, Tracking tracking, double step) {
  cfg.validate();
  if (!(step > 0.0)) throw ValueError("fista: step must be positive");
  detail::check_stack(s0.value(), d);
  const std::size_t K = d.K(), h = s0.shape()[2], w = s0.shape()[3];
  if (lambda.shape() != Shape{K, h, w}) {
    throw ShapeError("lambda", "expected " + shape_str({K, h, w}) + ", got " + shape_str(lambda.shape()));
  }
  for (double v : lambda.value().data) {
    if (!(v > 0.0) || !std::isfinite(v)) throw ValueError("fista: lambda maps must be strictly positive");
  }
  if (y_prime.height() != h || y_prime.width() != w) throw ShapeError("H/W", "fista: data and coefficients differ");

  // A^H Y' is constant; the data-term gradient is D^T (A^H A D y - A^H Y').
  const ad::Var aty(adjoint_A(y_prime.tensor(), mask));
  // Backward closures may outlive the caller's references, so they own copies.
  const auto dp = std::make_shared<const Dictionary>(d);
  const auto mp = std::make_shared<const LowResMask>(mask);
  const ad::LinearFn synth = [dp](const Tensor& t) { return dict_synthesize(t, *dp); };
  const ad::LinearFn analyze = [dp](const Tensor& t) { return dict_analyze(t, *dp); };
  const ad::LinearFn normal = [mp](const Tensor& t) { return normal_A(t, *mp); };

  const double obj0 = cfg.check_divergence ? objective(s0.value(), mask, d, y_prime, lambda.value()) : 0.0;
  const std::size_t untracked = tracking == Tracking::full ? 0 : tracking == Tracking::none ? cfg.T : cfg.T - cfg.T_grad;

  ad::Var x = s0, y = s0;
  const ad::Var lambda_const = ad::detach(lambda);
  for (std::size_t j = 1; j <= cfg.T; ++j) {
    const bool track = j > untracked;
    if (!track) {
      x = ad::detach(x);
      y = ad::detach(y);
    }
    const ad::Var& lam = track ? lambda : lambda_const;
    const ad::Var image = ad::linear_map(y, synth, analyze);
    const ad::Var resid = ad::sub(ad::linear_map(image, normal, normal), aty);
    const ad::Var grad = ad::linear_map(resid, analyze, synth);
    const ad::Var v = ad::sub(y, ad::scale(grad, step));
    const ad::Var tau = ad::reshape(ad::scale(lam, step), Shape{K, 1, h, w});
    const ad::Var x_next = ad::soft_threshold(v, tau);
    const double alpha = static_cast<double>(j - 1) / (static_cast<double>(j) + cfg.momentum_a);
    y = ad::add(x_next, ad::scale(ad::sub(x_next, x), alpha));
    x = x_next;

    if (cfg.check_divergence) {
      const double obj = objective(x.value(), mask, d, y_prime, lambda.value());
      if (!std::isfinite(obj) || obj > 10.0 * obj0) {
        throw NumericalError("fista diverged at iteration " + std::to_string(j) + " (objective " +
                             std::to_string(obj) + " vs initial " + std::to_string(obj0) +
                             "); step size too large");
      }
    }
  }
  return x;
}

inline ad::Var fista_solve(const ad::Var& s0, const LowResMask& mask, const Dictionary& d, const KSpace& y_prime,
                           const ad::Var& lambda, const FistaConfig& cfg, Tracking tracking) {
  return fista_solve(s0, mask, d, y_prime, lambda, cfg, tracking, fista_step(d, mask, cfg));
}

inline CoefficientStack fista_solve(const CoefficientStack& s0, const LowResMask& mask, const Dictionary& d,
                                    const KSpace& y_prime, const LambdaMaps& lambda, const FistaConfig& cfg) {
  const ad::Var out = fista_solve(ad::Var(s0.coeffs), mask, d, y_prime, ad::Var(lambda.maps), cfg, Tracking::none);
  return CoefficientStack(out.value());
}

}  // namespace cdl
