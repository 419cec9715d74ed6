#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>
#include <random>
#include <sstream>

#include "cdl/fft.hpp"
#include "cdl/pipeline.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

using namespace cdl;
using cdl::testing::random_dictionary;
using cdl::testing::random_tensor;

namespace {

const std::vector<std::size_t> kSmall{4, 6, 8};

double rel_diff(const ComplexImage& a, const ComplexImage& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.tensor().size(); ++i) {
    const double d = a.tensor()[i] - b.tensor()[i];
    num += d * d;
    den += b.tensor()[i] * b.tensor()[i];
  }
  return std::sqrt(num / den);
}

Dictionary with_beta(const Dictionary& d, double beta) {
  DictionaryMeta m = d.meta();
  m.beta = beta;
  return Dictionary(d.K(), d.kf(), d.filters(), m);
}

std::vector<Sample> phantom_samples(std::size_t count, std::size_t n, double sigma_sq, const LowResMask& mask,
                                    std::uint64_t seed) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < count; ++i) {
    ComplexImage x = phantom(PhantomKind::piecewise_smooth, n, n, seed + i);
    KSpace y = simulate(x, mask, NoiseModel{sigma_sq, seed + 1000 + i});
    out.push_back({"s" + std::to_string(i), std::move(y), mask, std::move(x)});
  }
  return out;
}

DictionaryBank small_bank(const std::vector<std::size_t>& Ks, std::size_t n, std::uint64_t seed) {
  std::vector<ComplexImage> corpus;
  for (std::size_t i = 0; i < 4; ++i) corpus.push_back(phantom(PhantomKind::piecewise_smooth, n, n, seed + i));
  PretrainGrid g;
  g.filter_counts = Ks;
  g.kernel_sizes = {5};
  g.lambdas = {0.05};
  g.betas = {0.25};
  return bank_build(g, corpus, 8, seed);
}

ReconConfig desk_recon(std::size_t T = 20, std::size_t T_grad = 8) {
  ReconConfig rc;
  rc.fista.T = T;
  rc.fista.T_grad = T_grad;
  return rc;
}

}  // namespace

TEST(Reconstruct, ZeroDataGivesZeroImage) {
  std::mt19937_64 rng(1);
  const auto d = random_dictionary(3, 5, rng);
  const auto mask = LowResMask::from_fraction(16, 16, 0.5);
  for (Variant v : {Variant::v1, Variant::v2, Variant::v3}) {
    const auto est = LambdaEstimator::create(v, 3, kSmall, 2);
    const auto x = reconstruct(KSpace(16, 16), mask, d, est, desk_recon());
    for (double a : x.tensor().data) EXPECT_EQ(a, 0.0) << to_string(v);
  }
}

TEST(Reconstruct, PlantedSolutionIsRecovered) {
  const std::size_t n = 16;
  const double beta = 0.25;
  std::mt19937_64 rng(3);
  const auto d = with_beta(random_dictionary(2, 5, rng), beta);

  Tensor s(Shape{2, 2, n, n});
  std::uniform_int_distribution<std::size_t> pos(0, s.size() - 1);
  std::uniform_real_distribution<double> amp(0.5, 1.5);
  for (int i = 0; i < 12; ++i) s[pos(rng)] = amp(rng);
  Tensor high = dict_synthesize(s, d);
  // The high-pass operator annihilates constants, so the planted part must be mean-free.
  const std::size_t plane = n * n;
  for (std::size_t c = 0; c < 2; ++c) {
    const double mean = std::accumulate(high.data.begin() + c * plane, high.data.begin() + (c + 1) * plane, 0.0) / plane;
    for (std::size_t p = 0; p < plane; ++p) high[c * plane + p] -= mean;
  }
  // X = H + L with L = lowpass(X) has L = H / (beta |gamma|^2) per frequency.
  Tensor low = high;
  fft::fft2_unitary(std::span<double>(low.data.data(), plane), std::span<double>(low.data.data() + plane, plane), n,
                    n, false);
  for (std::size_t fy = 0; fy < n; ++fy)
    for (std::size_t fx = 0; fx < n; ++fx) {
      const double g = gradient_symbol(fy, fx, n, n);
      const double m = g > 0.0 ? 1.0 / (beta * g) : 0.0;
      low[fy * n + fx] *= m;
      low[plane + fy * n + fx] *= m;
    }
  fft::fft2_unitary(std::span<double>(low.data.data(), plane), std::span<double>(low.data.data() + plane, plane), n,
                    n, true);
  Tensor truth = high;
  for (std::size_t i = 0; i < truth.size(); ++i) truth[i] += low[i];
  const ComplexImage x(truth);

  const auto mask = LowResMask::all_ones(n, n);
  auto est = LambdaEstimator::create(Variant::v3, 0, kSmall, 4);
  est.set_t(1e-7);
  ReconConfig rc = desk_recon(200, 1);
  rc.fista.check_divergence = false;
  const auto rec = reconstruct(KSpace(forward_A(x.tensor(), mask)), mask, d, est, rc);
  EXPECT_LT(rel_diff(rec, x), 1e-3);
}

TEST(Reconstruct, V3IsInvariantToFilterPermutation) {
  std::mt19937_64 rng(5);
  const auto d = random_dictionary(6, 5, rng);
  const auto mask = LowResMask::from_fraction(16, 16, 0.5);
  const auto x = phantom(PhantomKind::random_blobs, 16, 16, 6);
  const KSpace y = simulate(x, mask, NoiseModel{0.01, 7});
  const auto est = LambdaEstimator::create(Variant::v3, 0, kSmall, 8, 0.05);
  const auto base = reconstruct(y, mask, d, est, desk_recon());
  for (int trial = 0; trial < 3; ++trial) {
    std::vector<std::size_t> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    EXPECT_LT(rel_diff(reconstruct(y, mask, d.permuted(perm), est, desk_recon()), base), 1e-10);
  }
}

TEST(Reconstruct, V1AndV2ChangeUnderFilterPermutation) {
  std::mt19937_64 rng(9);
  const auto d = random_dictionary(4, 5, rng);
  const auto mask = LowResMask::from_fraction(16, 16, 0.5);
  const auto x = phantom(PhantomKind::random_blobs, 16, 16, 10);
  const KSpace y = simulate(x, mask, NoiseModel{0.01, 11});
  for (Variant v : {Variant::v1, Variant::v2}) {
    const auto est = LambdaEstimator::create(v, 4, kSmall, 12, 0.05);
    const auto a = reconstruct(y, mask, d, est, desk_recon());
    const auto b = reconstruct(y, mask, d.permuted({3, 2, 1, 0}), est, desk_recon());
    EXPECT_GT(rel_diff(a, b), 1e-8) << to_string(v);
  }
}

TEST(Reconstruct, KMismatchSurfacesAsShapeError) {
  std::mt19937_64 rng(13);
  const auto est = LambdaEstimator::create(Variant::v1, 4, kSmall, 14);
  const auto mask = LowResMask::all_ones(16, 16);
  EXPECT_THROW(reconstruct(KSpace(16, 16), mask, random_dictionary(5, 5, rng), est, desk_recon()), ShapeError);
  EXPECT_THROW(reconstruct(KSpace(16, 16), LowResMask::all_ones(16, 8), random_dictionary(4, 5, rng), est,
                           desk_recon()),
               ShapeError);
}

TEST(Reconstruct, ForwardValuesIndependentOfTracking) {
  std::mt19937_64 rng(15);
  const auto d = random_dictionary(3, 5, rng);
  const auto mask = LowResMask::from_fraction(16, 16, 0.6);
  const KSpace y = simulate(phantom(PhantomKind::shepp_logan_like, 16, 16, 16), mask, NoiseModel{0.05, 17});
  const auto est = LambdaEstimator::create(Variant::v3, 0, kSmall, 18, 0.1);
  const ReconConfig rc = desk_recon(12, 5);
  const Tensor none = reconstruct(y, mask, d, est, est.constants(), rc, Tracking::none).value();
  for (Tracking tr : {Tracking::full, Tracking::truncated}) {
    ad::Tape tape;
    EXPECT_EQ(reconstruct(y, mask, d, est, est.leaves(tape), rc, tr).value(), none);
  }
}

TEST(Reconstruct, BetaComesFromDictionaryUnlessOverridden) {
  std::mt19937_64 rng(19);
  const auto base = random_dictionary(2, 5, rng);
  const auto mask = LowResMask::all_ones(16, 16);
  const KSpace y = simulate(phantom(PhantomKind::random_blobs, 16, 16, 20), mask, NoiseModel{0.0, 0});
  const auto est = LambdaEstimator::create(Variant::v3, 0, kSmall, 21, 0.05);
  const auto a = reconstruct(y, mask, with_beta(base, 0.1), est, desk_recon());
  const auto b = reconstruct(y, mask, with_beta(base, 0.5), est, desk_recon());
  EXPECT_GT(rel_diff(a, b), 1e-6);
  ReconConfig forced = desk_recon();
  forced.beta = 0.5;
  EXPECT_EQ(reconstruct(y, mask, with_beta(base, 0.1), est, forced), b);
}

TEST(Reconstruct, LossGradientReachesTAndMatchesFiniteDifferences) {
  std::mt19937_64 rng(22);
  const auto d = random_dictionary(2, 3, rng);
  const auto mask = LowResMask::from_fraction(16, 16, 0.75);
  const auto x = phantom(PhantomKind::random_blobs, 16, 16, 23);
  const KSpace y = simulate(x, mask, NoiseModel{0.01, 24});
  const auto est = LambdaEstimator::create(Variant::v3, 0, {3, 4}, 25, 0.05);
  const ReconConfig rc = desk_recon(6, 6);
  const double step = fista_step(d, mask, rc.fista);

  std::vector<Tensor> inputs = est.unet().params();
  inputs.push_back(Tensor::scalar(est.t()));
  const cdl::testing::GraphFn f = [&](const std::vector<ad::Var>& in) {
    EstimatorVars p;
    p.net.assign(in.begin(), in.end() - 1);
    p.t = in.back();
    // Scaled so that gradients sit well above the relative-error floor.
    return ad::scale(mse_loss(reconstruct(y, mask, d, est, p, rc, Tracking::full, step), x), 1e4);
  };

  ad::Tape tape;
  const auto vars = est.leaves(tape);
  tape.backward(mse_loss(reconstruct(y, mask, d, est, vars, rc, Tracking::truncated, step), x));
  EXPECT_NE(tape.grad_or_zeros(vars.t)[0], 0.0);

  const auto res = cdl::testing::check_gradients(f, inputs, 60, 1e-4, 26);
  EXPECT_GE(res.checked, 50u);
  EXPECT_LT(res.max_rel_err, 1e-3);
}

TEST(Train, ZeroEpochsReturnsEstimatorUnchanged) {
  const auto bank = small_bank({2}, 16, 30);
  const auto est = LambdaEstimator::create(Variant::v3, 0, kSmall, 31);
  TrainConfig tc;
  tc.epochs = 0;
  const auto r = train({}, bank, est, desk_recon(), tc);
  EXPECT_TRUE(r.estimator == est);
  EXPECT_TRUE(r.loss_trace.empty());
  EXPECT_FALSE(r.initial_loss.has_value());
}

TEST(Train, SmokeRunReducesLoss) {
  const auto bank = small_bank({4}, 16, 40);
  const auto data = phantom_samples(20, 16, 0.002, LowResMask::all_ones(16, 16), 41);
  const auto est = LambdaEstimator::create(Variant::v3, 0, kSmall, 42, 0.3);
  TrainConfig tc;
  tc.epochs = 30;
  const auto r = train(data, bank, est, desk_recon(), tc);
  ASSERT_EQ(r.loss_trace.size(), 30u);
  ASSERT_TRUE(r.initial_loss.has_value());
  EXPECT_LT(r.loss_trace.back(), 0.6 * *r.initial_loss);
  EXPECT_GE(r.estimator.t(), kMinScalarT);
}

TEST(Train, RoundRobinCoversEveryKey) {
  const auto bank = small_bank({2, 3, 4}, 16, 50);
  const auto data = phantom_samples(7, 16, 0.01, LowResMask::from_fraction(16, 16, 0.5), 51);
  TrainConfig tc;
  tc.epochs = 1;
  const auto r = train(data, bank, LambdaEstimator::create(Variant::v3, 0, kSmall, 52, 0.1), desk_recon(6, 2), tc);
  ASSERT_EQ(r.key_usage.size(), 3u);
  for (const auto& [key, count] : r.key_usage) EXPECT_GE(count, data.size() / 3) << key;
}

TEST(Train, DeterministicAndBatchAware) {
  const auto bank = small_bank({2}, 16, 60);
  const auto data = phantom_samples(4, 16, 0.01, LowResMask::all_ones(16, 16), 61);
  const auto est = LambdaEstimator::create(Variant::v3, 0, kSmall, 62, 0.2);
  TrainConfig tc;
  tc.epochs = 2;
  const auto a = train(data, bank, est, desk_recon(6, 3), tc);
  const auto b = train(data, bank, est, desk_recon(6, 3), tc);
  EXPECT_TRUE(a.estimator == b.estimator);
  EXPECT_EQ(a.loss_trace, b.loss_trace);
  tc.batch_size = 4;
  const auto c = train(data, bank, est, desk_recon(6, 3), tc);
  EXPECT_FALSE(c.estimator == a.estimator);
}

TEST(Train, NonFiniteLossReportsContext) {
  const auto bank = small_bank({2}, 16, 70);
  auto data = phantom_samples(3, 16, 0.01, LowResMask::all_ones(16, 16), 71);
  data[1].truth.re()[0] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig tc;
  tc.epochs = 1;
  try {
    train(data, bank, LambdaEstimator::create(Variant::v3, 0, kSmall, 72), desk_recon(4, 2), tc);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("epoch 1"), std::string::npos) << what;
    EXPECT_NE(what.find("sample 1"), std::string::npos) << what;
    EXPECT_NE(what.find(bank.keys()[0]), std::string::npos) << what;
  }
}

TEST(Train, RejectsIncompatibleBankAndBadConfig) {
  const auto bank = small_bank({2, 3}, 16, 80);
  const auto data = phantom_samples(2, 16, 0.01, LowResMask::all_ones(16, 16), 81);
  TrainConfig tc;
  tc.epochs = 1;
  EXPECT_THROW(train(data, bank, LambdaEstimator::create(Variant::v1, 2, kSmall, 82), desk_recon(4, 2), tc),
               ShapeError);
  EXPECT_THROW(train({}, bank, LambdaEstimator::create(Variant::v3, 0, kSmall, 82), desk_recon(4, 2), tc), ValueError);
  tc.lr_net = 0.0;
  EXPECT_THROW(train(data, bank, LambdaEstimator::create(Variant::v3, 0, kSmall, 82), desk_recon(4, 2), tc), ValueError);
  tc.lr_net = 1e-4;
  tc.bank_subset = {"K9_kf5_lam0.05_beta0.25"};
  EXPECT_THROW(train(data, bank, LambdaEstimator::create(Variant::v3, 0, kSmall, 82), desk_recon(4, 2), tc), Error);
}

TEST(Evaluate, EmptyDatasetGivesHeaderOnly) {
  std::mt19937_64 rng(90);
  const auto r = evaluate({}, random_dictionary(2, 3, rng), "k", LambdaEstimator::create(Variant::v3, 0, kSmall, 91),
                          desk_recon());
  std::ostringstream os;
  write_metrics_csv(os, r.records);
  EXPECT_EQ(os.str(), "sample_id,dict_key,mse,ssim,blur\n");
}

TEST(Evaluate, RepeatedImageGivesIdenticalRowsAndMatchesRecomputation) {
  std::mt19937_64 rng(92);
  const auto d = random_dictionary(3, 5, rng);
  const auto mask = LowResMask::from_fraction(16, 16, 0.5);
  auto data = phantom_samples(1, 16, 0.05, mask, 93);
  data.push_back(data[0]);
  data.push_back(data[0]);
  data[1].id = "copy1";
  data[2].id = "copy2";
  const auto est = LambdaEstimator::create(Variant::v3, 0, kSmall, 94, 0.05);
  EvalOptions opt;
  opt.threads = 2;
  const auto r = evaluate(data, d, "dkey", est, desk_recon(), opt);
  ASSERT_EQ(r.records.size(), 3u);
  for (std::size_t i = 1; i < 3; ++i) {
    EXPECT_EQ(r.records[i].mse, r.records[0].mse);
    EXPECT_EQ(r.records[i].ssim, r.records[0].ssim);
    EXPECT_EQ(r.records[i].blur, r.records[0].blur);
    EXPECT_EQ(r.records[i].dict_key, "dkey");
  }

  // Recompute the first row from a saved reconstruction.
  const auto dir = std::filesystem::temp_directory_path() / "cdl_eval_recompute";
  std::filesystem::create_directories(dir);
  save_image(dir / "rec.cimg", r.reconstructions[0]);
  const ComplexImage rec = load_image(dir / "rec.cimg");
  const ComplexImage& ref = data[0].truth;
  const EvalMask m = eval_mask_from(ref, opt.mask_threshold);
  double s = 0.0;
  for (std::size_t i = 0; i < rec.pixels(); ++i) {
    if (!m.fg[i]) continue;
    s += std::norm(std::complex<double>(rec.re()[i] - ref.re()[i], rec.im()[i] - ref.im()[i]));
  }
  EXPECT_DOUBLE_EQ(r.records[0].mse, s / static_cast<double>(m.count()));
  EXPECT_EQ(r.records[0].ssim, ssim(rec, ref, m));
  EXPECT_EQ(r.records[0].blur, blur_metric(rec));
  EXPECT_EQ(rec, reconstruct(data[0].y, mask, d, est, desk_recon()));
  std::filesystem::remove_all(dir);
}

TEST(Evaluate, CsvLayouts) {
  std::ostringstream m;
  write_metrics_csv(m, {{"a", "K2", 0.5, 0.25, 0.125}});
  EXPECT_EQ(m.str(), "sample_id,dict_key,mse,ssim,blur\na,K2,0.5,0.25,0.125\n");
  std::ostringstream l;
  write_loss_csv(l, {2.0, 1.5});
  EXPECT_EQ(l.str(), "epoch,mean_loss\n1,2\n2,1.5\n");
}

TEST(Dataset, SaveLoadRoundTripIsBitwiseAndSorted) {
  const auto dir = std::filesystem::temp_directory_path() / "cdl_dataset_roundtrip";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  auto data = phantom_samples(3, 16, 0.2, LowResMask::from_fraction(16, 16, 0.5), 100);
  std::reverse(data.begin(), data.end());
  for (const auto& s : data) save_sample(dir, s);
  const auto back = load_dataset(dir);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    const Sample& orig = data[2 - i];
    EXPECT_EQ(back[i].id, orig.id);
    EXPECT_EQ(back[i].y, orig.y);
    EXPECT_EQ(back[i].mask, orig.mask);
    EXPECT_EQ(back[i].truth, orig.truth);
  }
  std::filesystem::remove(dir / "s1.truth.cimg");
  EXPECT_THROW(load_dataset(dir), IoError);
  EXPECT_THROW(load_dataset(dir / "missing"), IoError);
  std::filesystem::remove_all(dir);
}
