#pragma once

// Convolutional dictionary pretraining by batch alternating minimisation of
//   J(D, S) = sum_i 1/2 ||D s_i - x_i||^2 + lambda ||s_i||_1,   ||d_k|| = 1,
// where x_i is the high-pass part of corpus image i. Coding uses FISTA with a
// full sampling mask; the filter update is a backtracked projected gradient step.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cdl/fista.hpp"
#include "cdl/highpass.hpp"
#include "cdl/linops.hpp"
#include "cdl/rng.hpp"

namespace cdl {

struct PretrainOptions {
  std::size_t coding_iters = 30;
  std::size_t filter_steps = 5;
  std::size_t max_backtracks = 30;
  std::string corpus_name = "synthetic";
  std::optional<std::vector<double>> initial_filters;  // replaces the Gaussian start (normalised on use)
};

struct PretrainResult {
  Dictionary dictionary;
  std::vector<double> objective_trace;  // J after each epoch
  std::vector<std::string> events;      // filter re-initialisations
};

namespace detail {

inline void normalize_filter(std::span<double> f) {
  double n = 0.0;
  for (double v : f) n += v * v;
  n = std::sqrt(n);
  for (double& v : f) v /= n;
}

inline void gaussian_filter(std::span<double> f, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  for (double& v : f) v = g(rng);
  normalize_filter(f);
}

struct CodingProblem {
  const std::vector<Tensor>& targets;  // high-pass images [2,H,W]
  LowResMask full;
  double lambda;

  double objective(const Dictionary& d, const std::vector<Tensor>& codes) const {
    double j = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      const Tensor ds = dict_synthesize(codes[i], d);
      double data = 0.0, l1 = 0.0;
      for (std::size_t p = 0; p < ds.size(); ++p) data += (ds[p] - targets[i][p]) * (ds[p] - targets[i][p]);
      for (double v : codes[i].data) l1 += std::abs(v);
      j += 0.5 * data + lambda * l1;
    }
    return j;
  }
};

// d/d f_k[a,b] of sum_i 1/2 ||D s_i - x_i||^2
inline std::vector<double> filter_gradient(const Dictionary& d, const std::vector<Tensor>& codes,
                                           const std::vector<Tensor>& targets) {
  const std::size_t K = d.K(), kf = d.kf();
  const long r = static_cast<long>(kf / 2);
  std::vector<double> g(K * kf * kf, 0.0);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    Tensor res = dict_synthesize(codes[i], d);
    for (std::size_t p = 0; p < res.size(); ++p) res[p] -= targets[i][p];
    const long h = static_cast<long>(res.dim(1)), w = static_cast<long>(res.dim(2));
    const std::size_t plane = res.dim(1) * res.dim(2);
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t ch = 0; ch < 2; ++ch) {
        const double* s = codes[i].data.data() + (k * 2 + ch) * plane;
        const double* e = res.data.data() + ch * plane;
        for (std::size_t a = 0; a < kf; ++a)
          for (std::size_t b = 0; b < kf; ++b)
            g[(k * kf + a) * kf + b] += shift_dot(e, s, h, w, r - static_cast<long>(a), r - static_cast<long>(b),
                                                  Padding::circular);
      }
  }
  return g;
}

}  // namespace detail

/// Learns K unit-norm k_f x k_f filters on the high-pass parts of `corpus`.
inline PretrainResult pretrain_dictionary(const std::vector<ComplexImage>& corpus, std::size_t K, std::size_t kf,
                                          double lambda, double beta, std::size_t epochs, std::uint64_t seed,
                                          const PretrainOptions& opt = {}) {
  if (corpus.empty()) throw ValueError("pretrain: corpus is empty");
  if (K == 0) throw ValueError("pretrain: K must be positive");
  if (kf % 2 == 0) throw ShapeError("k_f", "pretrain: filter side must be odd");
  if (!(lambda > 0.0)) throw ValueError("pretrain: lambda must be positive");
  if (!(beta >= 0.0)) throw ValueError("pretrain: beta must be nonnegative");
  const std::size_t h = corpus[0].height(), w = corpus[0].width();
  for (const auto& x : corpus) {
    if (x.height() != h || x.width() != w) throw ShapeError("H/W", "pretrain: corpus images differ in size");
  }
  if (h < kf || w < kf) throw ShapeError("H/W", "pretrain: images smaller than filters");

  const SeedStream seeds(seed);
  std::vector<double> filters(K * kf * kf);
  if (opt.initial_filters) {
    if (opt.initial_filters->size() != filters.size()) throw ShapeError("filters", "pretrain: initial filters size");
    filters = *opt.initial_filters;
    for (std::size_t k = 0; k < K; ++k) detail::normalize_filter({filters.data() + k * kf * kf, kf * kf});
  } else {
    auto rng = seeds.engine("filter_init");
    for (std::size_t k = 0; k < K; ++k) detail::gaussian_filter({filters.data() + k * kf * kf, kf * kf}, rng);
  }
  DictionaryMeta meta{beta, lambda, opt.corpus_name, "seed=" + std::to_string(seed)};
  Dictionary d(K, kf, filters, meta);

  std::vector<Tensor> targets;
  for (const auto& x : corpus) targets.push_back(split(x, {beta}).high.tensor());
  const detail::CodingProblem prob{targets, LowResMask::all_ones(h, w), lambda};
  std::vector<Tensor> codes(corpus.size(), Tensor(Shape{K, 2, h, w}));
  std::vector<KSpace> data;
  for (const auto& t : targets) data.emplace_back(forward_A(t, prob.full));
  const LambdaMaps lam = LambdaMaps::uniform(K, h, w, lambda);

  PretrainResult res;
  auto reinit_rng = seeds.engine("filter_reinit");
  double current = prob.objective(d, codes);
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    // (a) sparse coding, warm started; keep the previous code if FISTA did not improve it.
    FistaConfig fc;
    fc.T = opt.coding_iters;
    fc.T_grad = 1;
    fc.check_divergence = false;
    const double step = fista_step(d, prob.full, fc);
    for (std::size_t i = 0; i < codes.size(); ++i) {
      const Tensor next =
          fista_solve(ad::Var(codes[i]), prob.full, d, data[i], ad::Var(lam.maps), fc, Tracking::none, step).value();
      if (objective(next, prob.full, d, data[i], lam.maps) <= objective(codes[i], prob.full, d, data[i], lam.maps)) {
        codes[i] = next;
      }
    }
    current = prob.objective(d, codes);

    // (b) projected gradient steps on the filters, each backtracked from 1/||S||^2.
    double s_sq = 0.0;
    for (const auto& c : codes) s_sq += dot(c, c);
    for (std::size_t step_i = 0; s_sq > 0.0 && step_i < opt.filter_steps; ++step_i) {
      const auto grad = detail::filter_gradient(d, codes, targets);
      bool accepted = false;
      double eta = 1.0 / s_sq;
      for (std::size_t bt = 0; bt <= opt.max_backtracks && !accepted; ++bt, eta *= 0.5) {
        std::vector<double> cand = d.filters();
        std::vector<std::string> notes;
        for (std::size_t k = 0; k < K; ++k) {
          std::span<double> f(cand.data() + k * kf * kf, kf * kf);
          double n = 0.0;
          for (std::size_t q = 0; q < f.size(); ++q) {
            f[q] -= eta * grad[k * kf * kf + q];
            n += f[q] * f[q];
          }
          if (std::sqrt(n) < 1e-12) {
            detail::gaussian_filter(f, reinit_rng);
            notes.push_back("epoch " + std::to_string(epoch) + ": filter " + std::to_string(k) +
                            " degenerated and was re-initialised");
          } else {
            detail::normalize_filter(f);
          }
        }
        Dictionary trial(K, kf, std::move(cand), meta);
        const double j = prob.objective(trial, codes);
        if (j < current) {
          d = std::move(trial);
          current = j;
          res.events.insert(res.events.end(), notes.begin(), notes.end());
          accepted = true;
        }
      }
      if (!accepted) break;
    }
    res.objective_trace.push_back(current);
  }
  res.dictionary = std::move(d);
  return res;
}

// ---------------------------------------------------------------------------
// Grid and bank
// ---------------------------------------------------------------------------

struct PretrainGrid {
  std::vector<double> betas;
  std::vector<double> lambdas;
  std::vector<std::size_t> kernel_sizes;
  std::vector<std::size_t> filter_counts;

  /// beta in {0.1, 0.25, 0.5}, lambda in {0.1, 0.5, 2, 4}, k_f in {9, 11}, K in {16, 32, 64, 128}.
  static PretrainGrid paper() { return {{0.1, 0.25, 0.5}, {0.1, 0.5, 2.0, 4.0}, {9, 11}, {16, 32, 64, 128}}; }

  std::size_t size() const { return betas.size() * lambdas.size() * kernel_sizes.size() * filter_counts.size(); }

  void validate() const {
    for (double b : betas) {
      if (!(b >= 0.0)) throw ValueError("grid: beta must be nonnegative");
    }
    for (double l : lambdas) {
      if (!(l > 0.0)) throw ValueError("grid: lambda must be positive");
    }
    for (std::size_t k : kernel_sizes) {
      if (k % 2 == 0) throw ValueError("grid: kernel sizes must be odd");
    }
    for (std::size_t k : filter_counts) {
      if (k == 0) throw ValueError("grid: filter counts must be positive");
    }
  }

  struct Point {
    std::size_t K, kf;
    double lambda, beta;
    std::string key() const { return dictionary_key(K, kf, lambda, beta); }
  };

  std::vector<Point> points() const {
    std::vector<Point> out;
    for (std::size_t K : filter_counts)
      for (std::size_t kf : kernel_sizes)
        for (double l : lambdas)
          for (double b : betas) out.push_back({K, kf, l, b});
    return out;
  }
};

/// Parses "K=4,8 kf=5,7 lambda=0.1,0.5 beta=0.1,0.25" (any order, whitespace or ';' separated).
inline PretrainGrid parse_grid(const std::string& spec) {
  PretrainGrid g;
  std::set<std::string> seen;
  std::string norm = spec;
  for (char& c : norm) {
    if (c == ';') c = ' ';
  }
  std::istringstream fields(norm);
  std::string field;
  while (fields >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw ValueError("grid: expected name=v1,v2,... but got '" + field + "'");
    const std::string name = field.substr(0, eq);
    if (!seen.insert(name).second) throw ValueError("grid: '" + name + "' given twice");
    std::vector<double> vals;
    std::istringstream list(field.substr(eq + 1));
    std::string item;
    while (std::getline(list, item, ',')) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(item, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != item.size()) throw ValueError("grid: bad number '" + item + "' for " + name);
      vals.push_back(v);
    }
    if (vals.empty()) throw ValueError("grid: empty list for " + name);
    const auto as_counts = [&](std::vector<std::size_t>& dst) {
      for (double v : vals) {
        if (v < 1 || v != std::floor(v)) throw ValueError("grid: " + name + " needs positive integers");
        dst.push_back(static_cast<std::size_t>(v));
      }
    };
    if (name == "K") {
      as_counts(g.filter_counts);
    } else if (name == "kf") {
      as_counts(g.kernel_sizes);
    } else if (name == "lambda") {
      g.lambdas = vals;
    } else if (name == "beta") {
      g.betas = vals;
    } else {
      throw ValueError("grid: unknown parameter '" + name + "' (expected K, kf, lambda, beta)");
    }
  }
  for (const char* name : {"K", "kf", "lambda", "beta"}) {
    if (!seen.count(name)) throw ValueError(std::string("grid: missing ") + name);
  }
  g.validate();
  return g;
}

struct BankEntry {
  std::string key;
  Dictionary dictionary;
  std::vector<double> objective_trace;
};

struct DictionaryBank {
  std::vector<BankEntry> entries;

  const BankEntry& at(const std::string& key) const {
    for (const auto& e : entries) {
      if (e.key == key) return e;
    }
    throw ValueError("bank has no dictionary '" + key + "'");
  }
  std::vector<std::string> keys() const {
    std::vector<std::string> k;
    for (const auto& e : entries) k.push_back(e.key);
    return k;
  }
};

/// Trains every grid point; each uses a seed derived from (seed, key).
inline DictionaryBank bank_build(const PretrainGrid& grid, const std::vector<ComplexImage>& corpus,
                                 std::size_t epochs, std::uint64_t seed, const PretrainOptions& opt = {},
                                 std::vector<std::string>* events = nullptr) {
  grid.validate();
  DictionaryBank bank;
  std::set<std::string> keys;
  const SeedStream seeds(seed);
  for (const auto& p : grid.points()) {
    const std::string key = p.key();
    if (!keys.insert(key).second) throw ValueError("grid produces duplicate key " + key);
    try {
      auto r = pretrain_dictionary(corpus, p.K, p.kf, p.lambda, p.beta, epochs, seeds.derive(key), opt);
      if (events) {
        for (const auto& e : r.events) events->push_back(key + ": " + e);
      }
      bank.entries.push_back({key, std::move(r.dictionary), std::move(r.objective_trace)});
    } catch (const NumericalError& e) {
      throw NumericalError(key + ": " + e.what());
    } catch (const ShapeError& e) {
      throw ShapeError(e.axis(), key + ": " + e.what());
    } catch (const ValueError& e) {
      throw ValueError(key + ": " + e.what());
    }
  }
  return bank;
}

/// Writes <key>.cdld and <key>.trace.csv per entry plus manifest.json; returns the manifest path.
inline std::filesystem::path save_bank(const std::filesystem::path& dir, const DictionaryBank& bank) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create bank directory '" + dir.string() + "': " + ec.message());
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : bank.entries) {
    const std::string dict_file = e.key + ".cdld", trace_file = e.key + ".trace.csv";
    save_dictionary(dir / dict_file, e.dictionary);
    std::ofstream tr(dir / trace_file);
    if (!tr) throw IoError("cannot write '" + (dir / trace_file).string() + "'");
    tr << "epoch,objective\n";
    tr.precision(17);
    for (std::size_t i = 0; i < e.objective_trace.size(); ++i) tr << i + 1 << ',' << e.objective_trace[i] << '\n';
    entries.push_back({{"key", e.key},
                       {"K", e.dictionary.K()},
                       {"kf", e.dictionary.kf()},
                       {"lambda", e.dictionary.meta().lambda},
                       {"beta", e.dictionary.meta().beta},
                       {"dictionary", dict_file},
                       {"trace", trace_file}});
  }
  const auto manifest = dir / "manifest.json";
  std::ofstream os(manifest);
  if (!os) throw IoError("cannot write '" + manifest.string() + "'");
  os << nlohmann::json{{"entries", entries}}.dump(2) << '\n';
  return manifest;
}

/// Accepts the bank directory or its manifest.json. Objective traces are not reloaded.
inline DictionaryBank load_bank(const std::filesystem::path& where) {
  const auto manifest = std::filesystem::is_directory(where) ? where / "manifest.json" : where;
  std::ifstream is(manifest);
  if (!is) throw IoError("cannot open bank manifest '" + manifest.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad bank manifest '" + manifest.string() + "': " + e.what());
  }
  DictionaryBank bank;
  try {
    for (const auto& e : j.at("entries")) {
      auto d = load_dictionary(manifest.parent_path() / e.at("dictionary").get<std::string>());
      bank.entries.push_back({e.at("key").get<std::string>(), std::move(d), {}});
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad bank manifest '" + manifest.string() + "': " + e.what());
  }
  return bank;
}

}  // namespace cdl
