#include <gtest/gtest.h>

#include <complex>
#include <random>

#include "cdl/highpass.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace cdl;
using cdl::testing::random_tensor;

namespace {

ComplexImage random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ComplexImage(random_tensor(Shape{2, h, w}, rng));
}

double sq_norm(const ComplexImage& x) { return dot(x.tensor(), x.tensor()); }

Tensor spectrum(const ComplexImage& x) {
  return forward_A(x.tensor(), LowResMask::all_ones(x.height(), x.width()));
}

}  // namespace

TEST(Highpass, ZeroBetaIsIdentity) {
  const auto x = random_image(8, 8, 1);
  const auto [lo, hi] = split(x, {0.0});
  EXPECT_EQ(lo.tensor(), x.tensor());
  for (double v : hi.tensor().data) EXPECT_EQ(v, 0.0);
}

TEST(Highpass, ConstantImageIsAllLowpass) {
  ComplexImage x(16, 16);
  for (auto& v : x.re()) v = 0.7;
  for (auto& v : x.im()) v = -0.2;
  for (double beta : {0.1, 0.5, 10.0}) {
    const auto [lo, hi] = split(x, {beta});
    for (std::size_t i = 0; i < lo.tensor().size(); ++i) {
      EXPECT_NEAR(lo.tensor()[i], x.tensor()[i], 1e-14);
      EXPECT_NEAR(hi.tensor()[i], 0.0, 1e-14);
    }
  }
}

TEST(Highpass, NegativeBetaRejected) { EXPECT_THROW(split(random_image(4, 4, 0), {-0.1}), ValueError); }

TEST(Highpass, SatisfiesNormalEquations) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto x = random_image(16, 16, seed);
    const auto lo = split(x, {0.25}).low;
    EXPECT_LT(cdl::testing::normal_equation_residual(x.tensor(), lo.tensor(), 0.25), 1e-9);
  }
}

TEST(Highpass, NonSquareNormalEquations) {
  const auto x = random_image(6, 12, 3);
  EXPECT_LT(cdl::testing::normal_equation_residual(x.tensor(), split(x, {0.5}).low.tensor(), 0.5), 1e-9);
}

TEST(Highpass, EnergySplitAndNonnegativeCrossSpectrum) {
  const auto x = random_image(16, 16, 7);
  const auto [lo, hi] = split(x, {0.25});
  const double cross = dot(lo.tensor(), hi.tensor());
  EXPECT_NEAR(sq_norm(x), sq_norm(lo) + sq_norm(hi) + 2.0 * cross, 1e-10 * sq_norm(x));

  const Tensor fl = spectrum(lo), fh = spectrum(hi);
  const std::size_t n = lo.pixels();
  for (std::size_t i = 0; i < n; ++i) {
    const double re = fl[i] * fh[i] + fl[n + i] * fh[n + i];
    EXPECT_GE(re, -1e-12);
  }
}

TEST(Highpass, LargerBetaNeverIncreasesLowpassSpectrum) {
  const auto x = random_image(16, 16, 11);
  const std::size_t n = x.pixels();
  Tensor prev = spectrum(x);
  for (double beta : {0.05, 0.1, 0.25, 0.5, 2.0}) {
    const Tensor cur = spectrum(split(x, {beta}).low);
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_LE(std::hypot(cur[i], cur[n + i]), std::hypot(prev[i], prev[n + i]) + 1e-12);
    }
    prev = cur;
  }
}

TEST(Highpass, SecondSplitContracts) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto x = random_image(16, 16, 100 + seed);
    const auto first = split(x, {0.25});
    const auto second = split(first.low, {0.25});
    EXPECT_LE(sq_norm(second.high), sq_norm(first.high));
  }
}

TEST(ResidualData, TrivialCases) {
  std::mt19937_64 rng(5);
  const auto mask = cdl::testing::random_symmetric_mask(8, 8, rng);
  const auto x = random_image(8, 8, 9);
  const KSpace y = forward_A(random_image(8, 8, 10), mask);

  EXPECT_EQ(residual_data(y, ComplexImage(8, 8), mask).tensor(), y.tensor());
  const auto r = residual_data(forward_A(x, mask), x, mask);
  for (double v : r.tensor().data) EXPECT_EQ(v, 0.0);
}

TEST(ResidualData, Superposition) {
  std::mt19937_64 rng(6);
  const auto mask = cdl::testing::random_symmetric_mask(8, 8, rng);
  const auto a = random_image(8, 8, 1), b = random_image(8, 8, 2);
  const KSpace y = forward_A(random_image(8, 8, 3), mask);
  Tensor sum = a.tensor();
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += b.tensor()[i];
  // Y - A(a+b) = (Y - A a) - A b
  const Tensor lhs = residual_data(y, ComplexImage(sum), mask).tensor();
  const Tensor ra = residual_data(y, a, mask).tensor();
  const Tensor ab = forward_A(b.tensor(), mask);
  for (std::size_t i = 0; i < lhs.size(); ++i) EXPECT_NEAR(lhs[i], ra[i] - ab[i], 1e-12);
}

TEST(ResidualData, ShapeMismatch) {
  const auto mask = LowResMask::all_ones(8, 8);
  EXPECT_THROW(residual_data(KSpace(8, 8), ComplexImage(8, 6), mask), ShapeError);
}
