#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>
#include <sstream>

#include "cdl/lambda_net.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

using namespace cdl;
using cdl::testing::random_dictionary;
using cdl::testing::random_tensor;

namespace {

const std::vector<std::size_t> kSmall{4, 6, 8};

ComplexImage random_image(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return ComplexImage(random_tensor(Shape{2, n, n}, rng));
}

Tensor map_slice(const Tensor& maps, std::size_t k) {
  const std::size_t plane = maps.dim(1) * maps.dim(2);
  return Tensor(Shape{maps.dim(1), maps.dim(2)},
                std::vector<double>(maps.data.begin() + k * plane, maps.data.begin() + (k + 1) * plane));
}

}  // namespace

TEST(UNet, OutputShapeAndInputChecks) {
  UNetArch a;
  a.in_channels = 3;
  a.out_channels = 5;
  a.widths = kSmall;
  const UNet net = UNet::init(a, 1);
  std::vector<ad::Var> p;
  for (const auto& t : net.params()) p.emplace_back(t);
  std::mt19937_64 rng(2);
  EXPECT_EQ(net.forward(ad::Var(random_tensor(Shape{2, 3, 16, 12}, rng)), p).shape(), (Shape{2, 5, 16, 12}));
  EXPECT_THROW(net.forward(ad::Var(Tensor(Shape{1, 2, 16, 16})), p), ShapeError);
  EXPECT_THROW(net.forward(ad::Var(Tensor(Shape{1, 3, 18, 16})), p), ShapeError);
}

TEST(UNet, InitIsDeterministicHeUniformWithZeroBias) {
  UNetArch a;
  a.widths = kSmall;
  const UNet n1 = UNet::init(a, 7), n2 = UNet::init(a, 7), n3 = UNet::init(a, 8);
  EXPECT_EQ(n1.params(), n2.params());
  EXPECT_NE(n1.params(), n3.params());
  for (std::size_t i = 0; i < n1.params().size(); i += 2) {
    const Tensor& k = n1.params()[i];
    const double bound = std::sqrt(6.0 / static_cast<double>(k.dim(1) * k.dim(2) * k.dim(3)));
    for (double v : k.data) EXPECT_LE(std::abs(v), bound);
    for (double v : n1.params()[i + 1].data) EXPECT_EQ(v, 0.0);
  }
}

TEST(LambdaEstimator, ZeroInputGivesConstantMaps) {
  std::mt19937_64 rng(3);
  const auto d = random_dictionary(4, 5, rng);
  for (Variant v : {Variant::v1, Variant::v2, Variant::v3}) {
    auto est = LambdaEstimator::create(v, 4, kSmall, 11);
    est.unet().params().back()[0] = 0.3;
    for (std::size_t c = 1; c < est.unet().params().back().size(); ++c) est.unet().params().back()[c] = 0.3;
    est.set_t(1.7);
    const auto maps = est.estimate(ComplexImage(16, 16), d);
    for (double x : maps.maps.data) EXPECT_EQ(x, 1.7 * ad::softplus(0.3)) << to_string(v);
  }
}

TEST(LambdaEstimator, PositiveAndGatedByT) {
  std::mt19937_64 rng(4);
  const auto d = random_dictionary(3, 5, rng);
  const auto x0 = random_image(16, 5);
  for (Variant v : {Variant::v1, Variant::v2, Variant::v3}) {
    auto est = LambdaEstimator::create(v, 3, kSmall, 12);
    const auto maps = est.estimate(x0, d);
    for (double x : maps.maps.data) EXPECT_GT(x, 0.0);
    const double peak = *std::max_element(maps.maps.data.begin(), maps.maps.data.end());
    est.set_t(1e-6);
    const auto small = est.estimate(x0, d);
    EXPECT_LE(*std::max_element(small.maps.data.begin(), small.maps.data.end()), 1e-6 * peak * (1 + 1e-12));
    est.set_t(-5.0);
    EXPECT_EQ(est.t(), kMinScalarT);
  }
}

TEST(LambdaEstimator, V3AcceptsAnyK) {
  const auto est = LambdaEstimator::create(Variant::v3, 0, kSmall, 13);
  const auto x0 = random_image(16, 6);
  std::mt19937_64 rng(7);
  for (std::size_t K : {1, 7}) {
    const auto maps = estimate_v3(est, x0, random_dictionary(K, 5, rng));
    EXPECT_EQ(maps.maps.shape, (Shape{K, 16, 16}));
  }
}

TEST(LambdaEstimator, V3IsExactlyPermutationEquivariant) {
  const auto est = LambdaEstimator::create(Variant::v3, 0, kSmall, 14);
  std::mt19937_64 rng(8);
  const auto d = random_dictionary(6, 5, rng);
  const auto x0 = random_image(16, 9);
  const auto base = estimate_v3(est, x0, d);
  for (int trial = 0; trial < 3; ++trial) {
    std::vector<std::size_t> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto maps = estimate_v3(est, x0, d.permuted(perm));
    for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(map_slice(maps.maps, k), map_slice(base.maps, perm[k]));
  }
}

TEST(LambdaEstimator, V3DuplicateFiltersShareMaps) {
  const auto est = LambdaEstimator::create(Variant::v3, 0, kSmall, 15);
  std::mt19937_64 rng(10);
  auto f = random_dictionary(3, 5, rng).filters();
  std::copy(f.begin(), f.begin() + 25, f.begin() + 50);
  const Dictionary d(3, 5, f);
  const auto maps = estimate_v3(est, random_image(16, 11), d);
  EXPECT_EQ(map_slice(maps.maps, 0), map_slice(maps.maps, 2));
  EXPECT_NE(map_slice(maps.maps, 0), map_slice(maps.maps, 1));
}

TEST(LambdaEstimator, V1AndV2AreNotPermutationEquivariant) {
  std::mt19937_64 rng(12);
  const auto d = random_dictionary(4, 5, rng);
  const auto x0 = random_image(16, 13);
  const std::vector<std::size_t> perm{1, 0, 3, 2};
  for (Variant v : {Variant::v1, Variant::v2}) {
    const auto est = LambdaEstimator::create(v, 4, kSmall, 16);
    const auto base = est.estimate(x0, d);
    const auto maps = est.estimate(x0, d.permuted(perm));
    bool any_diff = false;
    for (std::size_t k = 0; k < 4; ++k) any_diff |= !(map_slice(maps.maps, k) == map_slice(base.maps, perm[k]));
    EXPECT_TRUE(any_diff) << to_string(v);
  }
}

TEST(LambdaEstimator, KMismatchIsShapeError) {
  std::mt19937_64 rng(14);
  const auto x0 = random_image(16, 15);
  const auto v1 = LambdaEstimator::create(Variant::v1, 4, kSmall, 17);
  const auto v2 = LambdaEstimator::create(Variant::v2, 4, kSmall, 18);
  EXPECT_THROW(estimate_v1(v1, x0, 5), ShapeError);
  EXPECT_THROW(estimate_v2(v2, x0, random_dictionary(8, 5, rng)), ShapeError);
  EXPECT_EQ(estimate_v1(v1, x0, 4).maps.shape, (Shape{4, 16, 16}));
  EXPECT_THROW(estimate_v3(v1, x0, random_dictionary(4, 5, rng)), ValueError);
}

TEST(LambdaEstimator, V2InputIsBilinearInDictionaryAndImage) {
  std::mt19937_64 rng(16);
  const auto d = random_dictionary(3, 5, rng);
  const auto x0 = random_image(16, 17);
  const auto est = LambdaEstimator::create(Variant::v2, 3, kSmall, 19);
  Tensor xs = x0.tensor();
  for (double& v : xs.data) v /= 4.0;
  const auto a = estimate_v2(est, x0, d);
  const auto b = estimate_v2(est, ComplexImage(xs), d.scaled(4.0));
  for (std::size_t i = 0; i < a.maps.size(); ++i) EXPECT_NEAR(a.maps[i], b.maps[i], 1e-12 * std::abs(a.maps[i]));
}

TEST(LambdaEstimator, V3ParameterCountIndependentOfK) {
  EXPECT_EQ(LambdaEstimator::create(Variant::v3, 4, kSmall, 1).parameter_count(),
            LambdaEstimator::create(Variant::v3, 128, kSmall, 1).parameter_count());
  EXPECT_LT(LambdaEstimator::create(Variant::v1, 4, kSmall, 1).parameter_count(),
            LambdaEstimator::create(Variant::v1, 128, kSmall, 1).parameter_count());
  EXPECT_LT(LambdaEstimator::create(Variant::v3, 0, kSmall, 1).parameter_count(),
            LambdaEstimator::create(Variant::v2, 16, kSmall, 1).parameter_count());
}

TEST(LambdaEstimator, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(18);
  const auto d = random_dictionary(3, 5, rng);
  const auto x0 = random_image(8, 19);
  for (Variant v : {Variant::v1, Variant::v2, Variant::v3}) {
    const auto est = LambdaEstimator::create(v, 3, {3, 4}, 20);
    std::vector<Tensor> inputs = est.unet().params();
    inputs.push_back(Tensor::scalar(0.8));
    const Tensor weights = random_tensor(Shape{3, 8, 8}, rng);
    const cdl::testing::GraphFn f = [&](const std::vector<ad::Var>& in) {
      EstimatorVars p;
      p.net.assign(in.begin(), in.end() - 1);
      p.t = in.back();
      return ad::sum(ad::mul(est.estimate(x0, d, p), ad::Var(weights)));
    };
    const auto res = cdl::testing::check_gradients(f, inputs, 60, 1e-6, 21);
    EXPECT_GE(res.checked, 50u) << to_string(v);
    EXPECT_LT(res.max_rel_err, 1e-4) << to_string(v);
  }
}

TEST(Checkpoint, RoundTripIsBitwise) {
  for (Variant v : {Variant::v1, Variant::v2, Variant::v3}) {
    auto est = LambdaEstimator::create(v, 4, kSmall, 22);
    est.set_t(0.123456789);
    std::stringstream ss;
    write_estimator(ss, est);
    const std::string bytes = ss.str();
    EXPECT_EQ(bytes.substr(0, 4), "CDLN");
    EXPECT_EQ(static_cast<std::uint8_t>(bytes[8]), static_cast<std::uint8_t>(v));
    const auto back = read_estimator(ss);
    EXPECT_TRUE(back == est);
    std::stringstream again;
    write_estimator(again, back);
    EXPECT_EQ(again.str(), bytes);
  }
}

TEST(Checkpoint, CorruptionIsIoError) {
  const auto est = LambdaEstimator::create(Variant::v3, 0, kSmall, 23);
  std::stringstream ss;
  write_estimator(ss, est);
  std::string bytes = ss.str();

  std::string bad = bytes;
  bad[0] = 'X';
  std::stringstream s1(bad);
  EXPECT_THROW(read_estimator(s1), IoError);

  std::stringstream s2(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(read_estimator(s2), IoError);

  bad = bytes;
  bad[8] = 9;
  std::stringstream s3(bad);
  EXPECT_THROW(read_estimator(s3), IoError);
}
