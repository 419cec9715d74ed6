#pragma once

// End-to-end reconstruction network: zero-filled image, high-pass split,
// Lambda estimation, unrolled FISTA on the high-pass residual, and the
// residual connection X = D s + X_low. Also the training loop and evaluation.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "cdl/autodiff.hpp"
#include "cdl/data_metrics.hpp"
#include "cdl/dict_pretrain.hpp"
#include "cdl/fista.hpp"
#include "cdl/highpass.hpp"
#include "cdl/image_io.hpp"
#include "cdl/lambda_net.hpp"
#include "cdl/linops.hpp"
#include "cdl/rng.hpp"

namespace cdl {

struct ReconConfig {
  FistaConfig fista;
  std::optional<double> beta;  // unset: use the dictionary's own beta

  double beta_for(const Dictionary& d) const { return beta.value_or(d.meta().beta); }
};

struct Sample {
  std::string id;
  KSpace y;
  LowResMask mask;
  ComplexImage truth;
};

/// Differentiable forward pass. `step` <= 0 means derive it from the operator norm.
inline ad::Var reconstruct(const KSpace& y, const LowResMask& mask, const Dictionary& d, const LambdaEstimator& est,
                           const EstimatorVars& vars, const ReconConfig& cfg, Tracking tracking, double step = 0.0) {
  if (y.height() != mask.height() || y.width() != mask.width()) throw ShapeError("H/W", "k-space and mask differ");
  const std::size_t h = y.height(), w = y.width();
  const ComplexImage x0(adjoint_A(y.tensor(), mask));
  const HighpassSplit parts = split(x0, HighpassConfig{cfg.beta_for(d)});
  const KSpace y_prime = residual_data(y, parts.low, mask);

  const ad::Var lambda = est.estimate(x0, d, vars);
  const ad::Var s0(Tensor(Shape{d.K(), 2, h, w}));
  if (!(step > 0.0)) step = fista_step(d, mask, cfg.fista);
  const ad::Var s = fista_solve(s0, mask, d, y_prime, lambda, cfg.fista, tracking, step);

  const auto dp = std::make_shared<const Dictionary>(d);
  const ad::Var image = ad::linear_map(
      s, [dp](const Tensor& t) { return dict_synthesize(t, *dp); },
      [dp](const Tensor& t) { return dict_analyze(t, *dp); });
  return ad::add(image, ad::Var(parts.low.tensor()));
}

inline ComplexImage reconstruct(const KSpace& y, const LowResMask& mask, const Dictionary& d,
                                const LambdaEstimator& est, const ReconConfig& cfg) {
  return ComplexImage(reconstruct(y, mask, d, est, est.constants(), cfg, Tracking::none).value());
}

/// Mean of |x - truth|^2 over both planes of every pixel.
inline ad::Var mse_loss(const ad::Var& x, const ComplexImage& truth) {
  const ad::Var diff = ad::sub(x, ad::Var(truth.tensor()));
  return ad::mean(ad::mul(diff, diff));
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class DictionarySelection { round_robin, seeded_random };

struct TrainConfig {
  std::size_t epochs = 48;
  std::size_t batch_size = 1;
  double lr_net = 1e-4;
  double lr_scalars = 1e-2;
  std::uint64_t seed = 0;
  std::vector<std::string> bank_subset;  // empty: every key in the bank
  DictionarySelection selection = DictionarySelection::round_robin;

  void validate() const {
    if (!(lr_net > 0.0) || !(lr_scalars > 0.0)) throw ValueError("train: learning rates must be positive");
    if (batch_size < 1) throw ValueError("train: batch size must be at least 1");
  }
};

struct TrainResult {
  LambdaEstimator estimator;
  std::vector<double> loss_trace;      // mean loss per epoch
  std::optional<double> initial_loss;  // mean loss before the first update
  std::map<std::string, std::size_t> key_usage;
};

struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t steps = 0;
  std::vector<Tensor> m, v;

  /// params[i] -= lr[i] * mhat / (sqrt(vhat) + eps)
  void update(std::vector<Tensor>& params, const std::vector<Tensor>& grads, const std::vector<double>& lr) {
    if (m.empty()) {
      for (const auto& p : params) {
        m.emplace_back(p.shape);
        v.emplace_back(p.shape);
      }
    }
    ++steps;
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (std::size_t j = 0; j < params[i].size(); ++j) {
        const double g = grads[i][j];
        m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * g;
        v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * g * g;
        params[i][j] -= lr[i] * (m[i][j] / c1) / (std::sqrt(v[i][j] / c2) + eps);
      }
    }
  }
};

namespace detail {

class StepCache {
 public:
  double get(const std::string& key, const Dictionary& d, const LowResMask& mask, const FistaConfig& cfg) {
    auto [it, fresh] = steps_.try_emplace({key, mask.bits()}, 0.0);
    if (fresh) it->second = fista_step(d, mask, cfg);
    return it->second;
  }

 private:
  std::map<std::pair<std::string, std::vector<std::uint8_t>>, double> steps_;
};

inline std::vector<std::string> resolve_subset(const DictionaryBank& bank, const TrainConfig& tc,
                                               const LambdaEstimator& est) {
  std::vector<std::string> keys = tc.bank_subset.empty() ? bank.keys() : tc.bank_subset;
  if (keys.empty()) throw ValueError("train: no dictionaries to train with");
  for (const auto& k : keys) {
    const Dictionary& d = bank.at(k).dictionary;
    if (est.fixed_K() != 0 && d.K() != est.fixed_K()) {
      throw ShapeError("K", to_string(est.variant()) + " estimator has K=" + std::to_string(est.fixed_K()) +
                                " but dictionary " + k + " has K=" + std::to_string(d.K()));
    }
  }
  return keys;
}

}  // namespace detail

/// Mean loss of the current estimator over a dataset, rotating dictionaries as training would.
inline double mean_loss(const std::vector<Sample>& data, const DictionaryBank& bank,
                        const std::vector<std::string>& keys, const LambdaEstimator& est, const ReconConfig& cfg) {
  if (data.empty() || keys.empty()) throw ValueError("mean_loss: empty dataset or key list");
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Dictionary& d = bank.at(keys[i % keys.size()]).dictionary;
    const ad::Var x = reconstruct(data[i].y, data[i].mask, d, est, est.constants(), cfg, Tracking::none);
    total += mse_loss(x, data[i].truth).value()[0];
  }
  return total / static_cast<double>(data.size());
}

using EpochCallback = std::function<void(std::size_t epoch, double mean_loss)>;

inline TrainResult train(const std::vector<Sample>& data, const DictionaryBank& bank, LambdaEstimator est,
                         const ReconConfig& recon, const TrainConfig& tc, const EpochCallback& on_epoch = {}) {
  tc.validate();
  recon.fista.validate();
  TrainResult result;
  if (tc.epochs == 0) {
    result.estimator = std::move(est);
    return result;
  }
  if (data.empty()) throw ValueError("train: dataset is empty");
  const std::vector<std::string> keys = detail::resolve_subset(bank, tc, est);

  detail::StepCache steps;
  auto pick = SeedStream(tc.seed).engine("dict_select");
  std::uniform_int_distribution<std::size_t> uniform_key(0, keys.size() - 1);
  std::size_t counter = 0;

  result.initial_loss = mean_loss(data, bank, keys, est, recon);

  AdamState adam;
  std::vector<double> lr(est.unet().params().size(), tc.lr_net);
  lr.push_back(tc.lr_scalars);

  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < data.size(); start += tc.batch_size) {
      const std::size_t stop = std::min(data.size(), start + tc.batch_size);
      std::vector<Tensor> grads;
      for (std::size_t i = start; i < stop; ++i) {
        const std::size_t ki =
            tc.selection == DictionarySelection::round_robin ? counter++ % keys.size() : uniform_key(pick);
        const std::string& key = keys[ki];
        ++result.key_usage[key];
        const Dictionary& d = bank.at(key).dictionary;
        const Sample& s = data[i];

        ad::Tape tape;
        const EstimatorVars vars = est.leaves(tape);
        const double step = steps.get(key, d, s.mask, recon.fista);
        const ad::Var x = reconstruct(s.y, s.mask, d, est, vars, recon, Tracking::truncated, step);
        const ad::Var loss = mse_loss(x, s.truth);
        const double lv = loss.value()[0];
        if (!std::isfinite(lv)) {
          throw NumericalError("non-finite training loss at epoch " + std::to_string(epoch) + ", sample " +
                               std::to_string(i) + " ('" + s.id + "'), dictionary " + key);
        }
        epoch_loss += lv;
        tape.backward(loss);

        std::vector<ad::Var> leaves = vars.net;
        leaves.push_back(vars.t);
        if (grads.empty()) {
          for (const auto& v : leaves) grads.emplace_back(v.shape());
        }
        const double inv = 1.0 / static_cast<double>(stop - start);
        for (std::size_t p = 0; p < leaves.size(); ++p) {
          const Tensor g = tape.grad_or_zeros(leaves[p]);
          for (std::size_t j = 0; j < g.size(); ++j) grads[p][j] += inv * g[j];
        }
      }

      std::vector<Tensor> params = est.unet().params();
      params.push_back(Tensor::scalar(est.t()));
      adam.update(params, grads, lr);
      const double t = params.back()[0];
      params.pop_back();
      est.assign(params, t);
    }
    const double mean = epoch_loss / static_cast<double>(data.size());
    result.loss_trace.push_back(mean);
    if (on_epoch) on_epoch(epoch, mean);
  }
  result.estimator = std::move(est);
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct MetricRecord {
  std::string sample_id;
  std::string dict_key;
  double mse = 0.0;
  double ssim = 0.0;
  double blur = 0.0;
};

struct EvalOptions {
  double mask_threshold = 0.1;
  std::size_t threads = 0;  // 0: hardware concurrency
};

struct EvalResult {
  std::vector<MetricRecord> records;
  std::vector<ComplexImage> reconstructions;
};

inline MetricRecord score(const std::string& id, const std::string& key, const ComplexImage& x,
                          const ComplexImage& truth, double mask_threshold) {
  const EvalMask m = eval_mask_from(truth, mask_threshold);
  return {id, key, mse(x, truth, m), ssim(x, truth, m), blur_metric(x)};
}

inline EvalResult evaluate(const std::vector<Sample>& data, const Dictionary& d, const std::string& key,
                           const LambdaEstimator& est, const ReconConfig& cfg, const EvalOptions& opt = {}) {
  EvalResult out;
  out.records.resize(data.size());
  out.reconstructions.resize(data.size());
  if (data.empty()) return out;

  // Samples sharing a mask share a step size, so compute each one once up front.
  detail::StepCache steps;
  std::vector<double> step(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) step[i] = steps.get(key, d, data[i].mask, cfg.fista);

  const std::size_t workers =
      std::clamp<std::size_t>(opt.threads ? opt.threads : std::thread::hardware_concurrency(), 1, data.size());
  std::vector<std::exception_ptr> errors(workers);
  const auto run = [&](std::size_t wid) {
    try {
      for (std::size_t i = wid; i < data.size(); i += workers) {
        const Sample& s = data[i];
        out.reconstructions[i] = ComplexImage(
            reconstruct(s.y, s.mask, d, est, est.constants(), cfg, Tracking::none, step[i]).value());
        out.records[i] = score(s.id, key, out.reconstructions[i], s.truth, opt.mask_threshold);
      }
    } catch (...) {
      errors[wid] = std::current_exception();
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricRecord>& rows) {
  os << "sample_id,dict_key,mse,ssim,blur\n";
  os.precision(17);
  for (const auto& r : rows) os << r.sample_id << ',' << r.dict_key << ',' << r.mse << ',' << r.ssim << ',' << r.blur << '\n';
}

inline void write_loss_csv(std::ostream& os, const std::vector<double>& trace) {
  os << "epoch,mean_loss\n";
  os.precision(17);
  for (std::size_t e = 0; e < trace.size(); ++e) os << e + 1 << ',' << trace[e] << '\n';
}

// ---------------------------------------------------------------------------
// Dataset directories: <id>.truth.cimg + <id>.kspace.cksp per sample
// ---------------------------------------------------------------------------

inline void save_sample(const std::filesystem::path& dir, const Sample& s) {
  save_image(dir / (s.id + ".truth.cimg"), s.truth);
  save_kspace(dir / (s.id + ".kspace.cksp"), s.y, s.mask);
}

/// Loads every sample in `dir`, ordered by id.
inline std::vector<Sample> load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("dataset directory '" + dir.string() + "' does not exist");
  const std::string suffix = ".kspace.cksp";
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.size() > suffix.size() && name.ends_with(suffix)) ids.push_back(name.substr(0, name.size() - suffix.size()));
  }
  std::sort(ids.begin(), ids.end());
  std::vector<Sample> out;
  for (const auto& id : ids) {
    auto ks = load_kspace(dir / (id + suffix));
    const fs::path truth = dir / (id + ".truth.cimg");
    if (!fs::exists(truth)) throw IoError("sample '" + id + "' has k-space but no ground truth");
    ComplexImage x = load_image(truth);
    if (x.height() != ks.y.height() || x.width() != ks.y.width()) {
      throw IoError("sample '" + id + "': image and k-space sizes differ");
    }
    out.push_back({id, std::move(ks.y), std::move(ks.mask), std::move(x)});
  }
  return out;
}

}  // namespace cdl
