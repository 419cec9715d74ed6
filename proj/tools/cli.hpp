#pragma once

// Subcommands of the `cdl` tool. Kept in a header so tests can run the CLI in-process.

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdl/pipeline.hpp"
#include "cdl/version.hpp"

namespace cdl::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kUsage = 2, kIo = 3, kNumerical = 4, kInternal = 1 };

/// One JSON record per run, written beside the run's outputs.
class RunManifest {
 public:
  RunManifest(std::string command, json config, std::uint64_t seed)
      : start_(std::chrono::steady_clock::now()) {
    doc_["command"] = std::move(command);
    doc_["config"] = std::move(config);
    doc_["seed"] = seed;
    doc_["tool_version"] = kVersion;
    doc_["inputs"] = json::array();
    doc_["outputs"] = json::array();
    const std::time_t now = std::time(nullptr);
    std::tm utc{};
    gmtime_r(&now, &utc);
    std::ostringstream ts;
    ts << std::put_time(&utc, "%Y-%m-%dT%H:%M:%SZ");
    doc_["started_utc"] = ts.str();
  }

  void input(const fs::path& p) { doc_["inputs"].push_back(p.string()); }
  void output(const fs::path& p) { doc_["outputs"].push_back(p.string()); }
  json& extra() { return doc_; }

  void write(const fs::path& path) {
    doc_["wall_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    std::ofstream os(path);
    if (!os) throw IoError("cannot write manifest '" + path.string() + "'");
    os << doc_.dump(2) << '\n';
  }

 private:
  json doc_;
  std::chrono::steady_clock::time_point start_;
};

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory '" + dir.string() + "'");
}

inline std::vector<std::size_t> parse_sizes(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const long v = std::stol(item, &used);
      if (used != item.size() || v <= 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ValueError("expected a comma list of positive integers, got '" + s + "'");
    }
  }
  if (out.empty()) throw ValueError("expected a comma list of positive integers, got '" + s + "'");
  return out;
}

inline std::vector<std::string> split_keys(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

/// Keys of `bank` usable with `est`, optionally restricted to `wanted`.
inline std::vector<std::string> usable_keys(const DictionaryBank& bank, const LambdaEstimator& est,
                                            const std::vector<std::string>& wanted) {
  if (!wanted.empty()) {
    for (const auto& k : wanted) bank.at(k);
    return wanted;
  }
  std::vector<std::string> out;
  for (const auto& e : bank.entries) {
    if (est.fixed_K() == 0 || e.dictionary.K() == est.fixed_K()) out.push_back(e.key);
  }
  if (out.empty()) throw ShapeError("K", "no dictionary in the bank matches the estimator's K");
  return out;
}

inline double mean_of(const std::vector<MetricRecord>& rows, double MetricRecord::*field) {
  double s = 0.0;
  for (const auto& r : rows) s += r.*field;
  return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

struct SimulateOptions {
  std::string phantom = "piecewise_smooth";
  std::size_t size = 32;
  double sigma2 = kSigmaSqModerate;
  double keep_frac = 0.5;
  std::uint64_t seed = 0;
  std::size_t count = 1;
  std::string out;
  bool pgm = false;
};

inline void cmd_simulate(const SimulateOptions& o, std::ostream& log) {
  const PhantomKind kind = parse_phantom_kind(o.phantom);
  if (o.size == 0 || o.size % 2 != 0 || o.size > 1024) throw ValueError("--size must be even and at most 1024");
  if (!(o.sigma2 >= 0.0) || !std::isfinite(o.sigma2)) throw ValueError("--sigma2 must be nonnegative");
  if (o.count == 0) throw ValueError("--count must be positive");
  const LowResMask mask = LowResMask::from_fraction(o.size, o.size, o.keep_frac);
  const fs::path dir(o.out);
  ensure_dir(dir);

  RunManifest m("simulate",
                {{"phantom", to_string(kind)}, {"size", o.size}, {"sigma2", o.sigma2}, {"keep_frac", o.keep_frac},
                 {"count", o.count}, {"out", o.out}, {"pgm", o.pgm}},
                o.seed);
  const SeedStream seeds(o.seed);
  for (std::size_t i = 0; i < o.count; ++i) {
    std::ostringstream id;
    id << to_string(kind) << '_' << std::setw(4) << std::setfill('0') << i;
    const std::string n = std::to_string(i);
    ComplexImage x = phantom(kind, o.size, o.size, seeds.child("phantom").derive(n));
    KSpace y = simulate(x, mask, NoiseModel{o.sigma2, seeds.child("noise").derive(n)});
    const Sample s{id.str(), std::move(y), mask, std::move(x)};
    save_sample(dir, s);
    m.output(dir / (s.id + ".truth.cimg"));
    m.output(dir / (s.id + ".kspace.cksp"));
    if (o.pgm) {
      save_pgm(dir / (s.id + ".truth.pgm"), s.truth);
      save_pgm(dir / (s.id + ".zerofilled.pgm"), adjoint_A(s.y, mask));
    }
  }
  m.write(dir / "run_manifest.json");
  log << "simulated " << o.count << " sample(s) of " << o.size << "x" << o.size << " (" << mask.retained()
      << " retained frequencies, sigma^2=" << o.sigma2 << ") into " << dir.string() << '\n';
}

// ---------------------------------------------------------------------------
// pretrain-dict
// ---------------------------------------------------------------------------

struct PretrainDictOptions {
  std::string corpus_dir;
  std::string grid = "K=4,8 kf=5,7 lambda=0.1,0.5 beta=0.1,0.25";
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  std::string out_bank;
  std::size_t coding_iters = 30;
  std::size_t filter_steps = 5;
};

inline std::vector<ComplexImage> load_corpus(const fs::path& dir, RunManifest& m) {
  if (!fs::is_directory(dir)) throw IoError("corpus directory '" + dir.string() + "' does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".cimg") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("corpus directory '" + dir.string() + "' holds no .cimg images");
  std::vector<ComplexImage> corpus;
  for (const auto& f : files) {
    corpus.push_back(load_image(f));
    m.input(f);
  }
  return corpus;
}

inline void cmd_pretrain_dict(const PretrainDictOptions& o, std::ostream& log) {
  const PretrainGrid grid = o.grid == "paper" ? PretrainGrid::paper() : parse_grid(o.grid);
  grid.validate();
  RunManifest m("pretrain-dict",
                {{"corpus_dir", o.corpus_dir}, {"grid", o.grid}, {"epochs", o.epochs}, {"out_bank", o.out_bank},
                 {"coding_iters", o.coding_iters}, {"filter_steps", o.filter_steps}},
                o.seed);
  const auto corpus = load_corpus(o.corpus_dir, m);
  PretrainOptions po;
  po.coding_iters = o.coding_iters;
  po.filter_steps = o.filter_steps;
  po.corpus_name = fs::path(o.corpus_dir).filename().string();
  log << "pretraining " << grid.size() << " dictionaries on " << corpus.size() << " images\n";
  std::vector<std::string> events;
  const DictionaryBank bank = bank_build(grid, corpus, o.epochs, o.seed, po, &events);
  for (const auto& e : events) log << "  " << e << '\n';

  const fs::path dir(o.out_bank);
  ensure_dir(dir);
  m.output(save_bank(dir, bank));
  for (const auto& e : bank.entries) {
    m.output(dir / (e.key + ".cdld"));
    log << "  " << e.key << "  J=" << (e.objective_trace.empty() ? 0.0 : e.objective_trace.back()) << '\n';
  }
  m.extra()["keys"] = bank.keys();
  m.write(dir / "run_manifest.json");
  log << "wrote bank of " << bank.entries.size() << " to " << dir.string() << '\n';
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOptions {
  std::string data_dir;
  std::string bank;
  std::string variant = "v3";
  std::size_t T = 20;
  std::size_t T_grad = 8;
  std::size_t epochs = 48;
  double lr_net = 1e-4;
  double lr_scalars = 1e-2;
  std::uint64_t seed = 0;
  std::string out_ckpt;
  std::string widths = "16,32,64";
  double t_init = 1.0;
  std::string keys;
  std::size_t batch_size = 1;
  std::string selection = "round-robin";
};

inline fs::path sibling(const fs::path& file, const std::string& suffix) {
  return file.parent_path() / (file.stem().string() + suffix);
}

inline void cmd_train(const TrainOptions& o, std::ostream& log) {
  const Variant variant = parse_variant(o.variant);
  TrainConfig tc;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch_size;
  tc.lr_net = o.lr_net;
  tc.lr_scalars = o.lr_scalars;
  tc.seed = o.seed;
  tc.bank_subset = split_keys(o.keys);
  if (o.selection == "random") {
    tc.selection = DictionarySelection::seeded_random;
  } else if (o.selection != "round-robin") {
    throw ValueError("--selection must be round-robin or random");
  }
  tc.validate();
  ReconConfig rc;
  rc.fista.T = o.T;
  rc.fista.T_grad = o.T_grad;
  rc.fista.validate();

  RunManifest m("train",
                {{"data_dir", o.data_dir}, {"bank", o.bank}, {"variant", to_string(variant)}, {"T", o.T},
                 {"T_grad", o.T_grad}, {"epochs", o.epochs}, {"lr_net", o.lr_net}, {"lr_scalars", o.lr_scalars},
                 {"out_ckpt", o.out_ckpt}, {"widths", o.widths}, {"t_init", o.t_init}, {"keys", o.keys},
                 {"batch_size", o.batch_size}, {"selection", o.selection}},
                o.seed);
  const auto data = load_dataset(o.data_dir);
  m.input(o.data_dir);
  const DictionaryBank bank = load_bank(o.bank);
  m.input(o.bank);

  const std::vector<std::string> keys = tc.bank_subset.empty() ? bank.keys() : tc.bank_subset;
  if (keys.empty()) throw ValueError("bank is empty");
  std::size_t K = 0;
  if (variant != Variant::v3) {
    K = bank.at(keys.front()).dictionary.K();
    for (const auto& k : keys) {
      if (bank.at(k).dictionary.K() != K) {
        throw ShapeError("K", to_string(variant) + " needs one K across the training keys; restrict with --keys");
      }
    }
  }
  const auto est = LambdaEstimator::create(variant, K, parse_sizes(o.widths), SeedStream(o.seed).derive("init"),
                                           o.t_init);
  log << "training " << to_string(variant) << " (" << est.parameter_count() << " parameters) on " << data.size()
      << " samples, " << keys.size() << " dictionaries\n";
  const TrainResult r = train(data, bank, est, rc, tc, [&](std::size_t epoch, double loss) {
    log << "  epoch " << epoch << "  mean loss " << loss << '\n';
  });

  const fs::path ckpt(o.out_ckpt);
  if (ckpt.has_parent_path()) ensure_dir(ckpt.parent_path());
  save_estimator(ckpt, r.estimator);
  const fs::path loss_csv = sibling(ckpt, ".loss.csv");
  {
    std::ofstream os(loss_csv);
    if (!os) throw IoError("cannot write '" + loss_csv.string() + "'");
    write_loss_csv(os, r.loss_trace);
  }
  m.output(ckpt);
  m.output(loss_csv);
  if (r.initial_loss) m.extra()["initial_loss"] = *r.initial_loss;
  m.extra()["final_t"] = r.estimator.t();
  m.extra()["key_usage"] = r.key_usage;
  m.write(sibling(ckpt, ".run_manifest.json"));
  log << "wrote " << ckpt.string() << " (t=" << r.estimator.t() << ")\n";
}

// ---------------------------------------------------------------------------
// reconstruct
// ---------------------------------------------------------------------------

struct ReconstructOptions {
  std::string ckpt;
  std::string bank;
  std::string key;
  std::string data_dir;
  std::string kspace;
  std::string out;
  std::size_t T = 20;
  std::optional<double> beta;
  bool pgm = false;
};

inline ReconConfig inference_config(std::size_t T, std::optional<double> beta) {
  ReconConfig rc;
  rc.fista.T = T;
  rc.fista.T_grad = 1;
  rc.beta = beta;
  rc.fista.validate();
  return rc;
}

inline void cmd_reconstruct(const ReconstructOptions& o, std::ostream& log) {
  if (o.data_dir.empty() == o.kspace.empty()) throw ValueError("give exactly one of --data-dir or --kspace");
  const ReconConfig rc = inference_config(o.T, o.beta);
  json cfg{{"ckpt", o.ckpt}, {"bank", o.bank}, {"key", o.key}, {"data_dir", o.data_dir}, {"kspace", o.kspace},
           {"out", o.out}, {"T", o.T}, {"pgm", o.pgm}};
  if (o.beta) cfg["beta"] = *o.beta;
  RunManifest m("reconstruct", cfg, 0);
  const auto est = load_estimator(o.ckpt);
  m.input(o.ckpt);
  const DictionaryBank bank = load_bank(o.bank);
  m.input(o.bank);
  const Dictionary& d = bank.at(o.key).dictionary;

  std::vector<std::pair<std::string, MaskedKSpace>> inputs;
  if (!o.kspace.empty()) {
    inputs.emplace_back(fs::path(o.kspace).stem().stem().string(), load_kspace(o.kspace));
    m.input(o.kspace);
  } else {
    for (auto& s : load_dataset(o.data_dir)) inputs.emplace_back(s.id, MaskedKSpace{std::move(s.y), std::move(s.mask)});
    m.input(o.data_dir);
  }
  const fs::path dir(o.out);
  ensure_dir(dir);
  for (const auto& [id, ks] : inputs) {
    const ComplexImage x = reconstruct(ks.y, ks.mask, d, est, rc);
    save_image(dir / (id + ".recon.cimg"), x);
    m.output(dir / (id + ".recon.cimg"));
    if (o.pgm) save_pgm(dir / (id + ".recon.pgm"), x);
  }
  m.write(dir / "run_manifest.json");
  log << "reconstructed " << inputs.size() << " image(s) with " << o.key << " into " << dir.string() << '\n';
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvaluateOptions {
  std::string ckpt;
  std::string bank;
  std::string data_dir;
  std::string keys;
  std::string out;
  std::size_t T = 20;
  std::size_t threads = 0;
  double mask_threshold = 0.1;
  bool save_recons = false;
};

inline void cmd_evaluate(const EvaluateOptions& o, std::ostream& log) {
  const ReconConfig rc = inference_config(o.T, std::nullopt);
  RunManifest m("evaluate",
                {{"ckpt", o.ckpt}, {"bank", o.bank}, {"data_dir", o.data_dir}, {"keys", o.keys}, {"out", o.out},
                 {"T", o.T}, {"threads", o.threads}, {"mask_threshold", o.mask_threshold},
                 {"save_recons", o.save_recons}},
                0);
  const auto est = load_estimator(o.ckpt);
  m.input(o.ckpt);
  const DictionaryBank bank = load_bank(o.bank);
  m.input(o.bank);
  const auto data = load_dataset(o.data_dir);
  m.input(o.data_dir);
  const auto keys = usable_keys(bank, est, split_keys(o.keys));

  const fs::path dir(o.out);
  ensure_dir(dir);
  EvalOptions eo;
  eo.mask_threshold = o.mask_threshold;
  eo.threads = o.threads;
  std::vector<MetricRecord> all;
  json summary = json::array();
  log << std::left << std::setw(28) << "dictionary" << std::setw(14) << "mean MSE" << std::setw(12) << "mean SSIM"
      << "mean blur\n";
  for (const auto& key : keys) {
    const auto r = evaluate(data, bank.at(key).dictionary, key, est, rc, eo);
    all.insert(all.end(), r.records.begin(), r.records.end());
    const double mse_m = mean_of(r.records, &MetricRecord::mse), ssim_m = mean_of(r.records, &MetricRecord::ssim),
                 blur_m = mean_of(r.records, &MetricRecord::blur);
    summary.push_back({{"dict_key", key}, {"mean_mse", mse_m}, {"mean_ssim", ssim_m}, {"mean_blur", blur_m}});
    log << std::setw(28) << key << std::setw(14) << mse_m << std::setw(12) << ssim_m << blur_m << '\n';
    if (o.save_recons) {
      for (std::size_t i = 0; i < data.size(); ++i) {
        save_image(dir / (data[i].id + "." + key + ".recon.cimg"), r.reconstructions[i]);
      }
    }
  }
  const fs::path csv = dir / "metrics.csv", table = dir / "per_dictionary.csv";
  {
    std::ofstream os(csv);
    if (!os) throw IoError("cannot write '" + csv.string() + "'");
    write_metrics_csv(os, all);
  }
  {
    std::ofstream os(table);
    if (!os) throw IoError("cannot write '" + table.string() + "'");
    os.precision(17);
    os << "dict_key,mean_mse,mean_ssim,mean_blur\n";
    for (const auto& s : summary) {
      os << s["dict_key"].get<std::string>() << ',' << s["mean_mse"].get<double>() << ','
         << s["mean_ssim"].get<double>() << ',' << s["mean_blur"].get<double>() << '\n';
    }
  }
  m.output(csv);
  m.output(table);
  m.extra()["summary"] = summary;
  m.write(dir / "run_manifest.json");
}

// ---------------------------------------------------------------------------
// permute-test
// ---------------------------------------------------------------------------

struct PermuteTestOptions {
  std::vector<std::string> ckpts;
  std::string bank;
  std::string key;
  std::string data_dir;
  std::size_t perms = 3;
  std::uint64_t seed = 0;
  std::size_t T = 20;
  std::string out;
  double mask_threshold = 0.1;
};

struct PermutationRow {
  std::string variant;
  std::string checkpoint;
  std::string label;
  std::vector<std::size_t> perm;
  double mse = 0.0, ssim = 0.0;
  double delta_mse = 0.0, delta_ssim = 0.0;
  double rel_delta_mse = 0.0;
};

/// Identity first, then `count` seeded random permutations of K filters.
inline std::vector<std::vector<std::size_t>> permutations(std::size_t K, std::size_t count, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> id(K);
  std::iota(id.begin(), id.end(), 0);
  out.push_back(id);
  auto rng = SeedStream(seed).engine("permutations");
  for (std::size_t i = 0; i < count; ++i) {
    auto p = id;
    std::shuffle(p.begin(), p.end(), rng);
    out.push_back(std::move(p));
  }
  return out;
}

inline std::vector<PermutationRow> permutation_deltas(const LambdaEstimator& est, const std::string& ckpt_name,
                                                      const Dictionary& d, const std::vector<Sample>& data,
                                                      std::size_t count, std::uint64_t seed, const ReconConfig& rc,
                                                      const EvalOptions& eo) {
  const auto perms = permutations(d.K(), count, seed);
  std::vector<PermutationRow> rows;
  double base_mse = 0.0, base_ssim = 0.0;
  for (std::size_t i = 0; i < perms.size(); ++i) {
    const auto r = evaluate(data, d.permuted(perms[i]), d.key(), est, rc, eo);
    PermutationRow row{to_string(est.variant()), ckpt_name, i == 0 ? "identity" : "pi" + std::to_string(i), perms[i],
                       mean_of(r.records, &MetricRecord::mse), mean_of(r.records, &MetricRecord::ssim)};
    if (i == 0) {
      base_mse = row.mse;
      base_ssim = row.ssim;
    }
    row.delta_mse = row.mse - base_mse;
    row.delta_ssim = row.ssim - base_ssim;
    row.rel_delta_mse = base_mse > 0.0 ? std::abs(row.delta_mse) / base_mse : std::abs(row.delta_mse);
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void cmd_permute_test(const PermuteTestOptions& o, std::ostream& log) {
  if (o.ckpts.empty()) throw ValueError("give at least one --ckpt");
  const ReconConfig rc = inference_config(o.T, std::nullopt);
  RunManifest m("permute-test",
                {{"ckpts", o.ckpts}, {"bank", o.bank}, {"key", o.key}, {"data_dir", o.data_dir}, {"perms", o.perms},
                 {"T", o.T}, {"out", o.out}, {"mask_threshold", o.mask_threshold}},
                o.seed);
  const DictionaryBank bank = load_bank(o.bank);
  m.input(o.bank);
  const Dictionary& d = bank.at(o.key).dictionary;
  const auto data = load_dataset(o.data_dir);
  m.input(o.data_dir);
  EvalOptions eo;
  eo.mask_threshold = o.mask_threshold;

  std::vector<PermutationRow> rows;
  for (const auto& c : o.ckpts) {
    const auto est = load_estimator(c);
    m.input(c);
    auto r = permutation_deltas(est, fs::path(c).filename().string(), d, data, o.perms, o.seed, rc, eo);
    rows.insert(rows.end(), r.begin(), r.end());
  }

  const fs::path dir(o.out);
  ensure_dir(dir);
  const fs::path csv = dir / "permute.csv";
  {
    std::ofstream os(csv);
    if (!os) throw IoError("cannot write '" + csv.string() + "'");
    os.precision(17);
    os << "variant,checkpoint,permutation,order,mse,ssim,delta_mse,delta_ssim,rel_delta_mse\n";
    for (const auto& r : rows) {
      std::string order;
      for (std::size_t k : r.perm) order += (order.empty() ? "" : " ") + std::to_string(k);
      os << r.variant << ',' << r.checkpoint << ',' << r.label << ',' << order << ',' << r.mse << ',' << r.ssim << ','
         << r.delta_mse << ',' << r.delta_ssim << ',' << r.rel_delta_mse << '\n';
    }
  }
  m.output(csv);
  m.write(dir / "run_manifest.json");

  log << std::left << std::setw(8) << "variant" << std::setw(24) << "checkpoint" << std::setw(26) << "dMSE (mean +- sd)"
      << "dSSIM (mean +- sd)\n";
  for (const auto& c : o.ckpts) {
    const std::string name = fs::path(c).filename().string();
    std::vector<double> dm, ds;
    std::string variant;
    for (const auto& r : rows) {
      if (r.checkpoint != name || r.label == "identity") continue;
      variant = r.variant;
      dm.push_back(r.delta_mse);
      ds.push_back(r.delta_ssim);
    }
    const auto stats = [](const std::vector<double>& v) {
      if (v.empty()) return std::pair{0.0, 0.0};
      const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      double var = 0.0;
      for (double x : v) var += (x - mean) * (x - mean);
      return std::pair{mean, std::sqrt(var / static_cast<double>(v.size()))};
    };
    const auto [mm, sm] = stats(dm);
    const auto [ms, ss] = stats(ds);
    std::ostringstream a, b;
    a << std::scientific << std::setprecision(2) << mm << " +- " << sm;
    b << std::scientific << std::setprecision(2) << ms << " +- " << ss;
    log << std::setw(8) << variant << std::setw(24) << name << std::setw(26) << a.str() << b.str() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

/// Parses and runs one command. Returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Convolutional dictionary learning with learned sparsity-level maps", "cdl"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  SimulateOptions sim;
  auto* s = app.add_subcommand("simulate", "Generate phantoms and simulated low-resolution noisy k-space");
  s->add_option("--phantom", sim.phantom, "shepp_logan_like | random_blobs | piecewise_smooth")->capture_default_str();
  s->add_option("--size", sim.size, "Image side length (even)")->capture_default_str();
  s->add_option("--sigma2", sim.sigma2, "Complex noise variance")->capture_default_str();
  s->add_option("--keep-frac", sim.keep_frac, "Retained central k-space fraction per axis")->capture_default_str();
  s->add_option("--seed", sim.seed)->capture_default_str();
  s->add_option("--count", sim.count, "Number of samples")->capture_default_str();
  s->add_option("--out", sim.out, "Output directory")->required();
  s->add_flag("--pgm", sim.pgm, "Also write PGM previews");

  PretrainDictOptions pre;
  auto* p = app.add_subcommand("pretrain-dict", "Pretrain a bank of convolutional dictionaries");
  p->add_option("--corpus-dir", pre.corpus_dir, "Directory of .cimg training images")->required();
  p->add_option("--grid", pre.grid, "Grid as 'K=.. kf=.. lambda=.. beta=..' or 'paper'")->capture_default_str();
  p->add_option("--epochs", pre.epochs)->capture_default_str();
  p->add_option("--seed", pre.seed)->capture_default_str();
  p->add_option("--out-bank", pre.out_bank, "Output bank directory")->required();
  p->add_option("--coding-iters", pre.coding_iters)->capture_default_str();
  p->add_option("--filter-steps", pre.filter_steps)->capture_default_str();

  TrainOptions tr;
  auto* t = app.add_subcommand("train", "Train a Lambda-map estimator through the unrolled reconstruction");
  t->add_option("--data-dir", tr.data_dir, "Directory of simulated samples")->required();
  t->add_option("--bank", tr.bank, "Bank directory or manifest")->required();
  t->add_option("--variant", tr.variant, "v1 | v2 | v3")->capture_default_str();
  t->add_option("--T", tr.T, "Unrolled FISTA iterations")->capture_default_str();
  t->add_option("--Tgrad", tr.T_grad, "Tracked (backpropagated) iterations")->capture_default_str();
  t->add_option("--epochs", tr.epochs)->capture_default_str();
  t->add_option("--lr-net", tr.lr_net)->capture_default_str();
  t->add_option("--lr-scalars", tr.lr_scalars)->capture_default_str();
  t->add_option("--seed", tr.seed)->capture_default_str();
  t->add_option("--out-ckpt", tr.out_ckpt, "Checkpoint path")->required();
  t->add_option("--widths", tr.widths, "U-Net channel widths per level")->capture_default_str();
  t->add_option("--t-init", tr.t_init, "Initial value of the scalar t")->capture_default_str();
  t->add_option("--keys", tr.keys, "Comma list of bank keys to train with (default: all)");
  t->add_option("--batch-size", tr.batch_size)->capture_default_str();
  t->add_option("--selection", tr.selection, "round-robin | random")->capture_default_str();

  ReconstructOptions rec;
  auto* r = app.add_subcommand("reconstruct", "Reconstruct images with a trained estimator and one dictionary");
  r->add_option("--ckpt", rec.ckpt)->required();
  r->add_option("--bank", rec.bank)->required();
  r->add_option("--key", rec.key, "Dictionary key in the bank")->required();
  r->add_option("--data-dir", rec.data_dir, "Directory of samples");
  r->add_option("--kspace", rec.kspace, "Single .cksp file");
  r->add_option("--out", rec.out, "Output directory")->required();
  r->add_option("--T", rec.T)->capture_default_str();
  r->add_option("--beta", rec.beta, "Override the dictionary's high-pass beta");
  r->add_flag("--pgm", rec.pgm, "Also write PGM previews");

  EvaluateOptions ev;
  auto* e = app.add_subcommand("evaluate", "Sweep bank dictionaries and report MSE, SSIM and blur");
  e->add_option("--ckpt", ev.ckpt)->required();
  e->add_option("--bank", ev.bank)->required();
  e->add_option("--data-dir", ev.data_dir)->required();
  e->add_option("--keys", ev.keys, "Comma list of keys (default: all compatible)");
  e->add_option("--out", ev.out, "Output directory")->required();
  e->add_option("--T", ev.T)->capture_default_str();
  e->add_option("--threads", ev.threads, "Worker threads (0: all cores)")->capture_default_str();
  e->add_option("--mask-threshold", ev.mask_threshold)->capture_default_str();
  e->add_flag("--save-recons", ev.save_recons);

  PermuteTestOptions pt;
  auto* q = app.add_subcommand("permute-test", "Measure metric changes under random filter permutations");
  q->add_option("--ckpt", pt.ckpts, "Checkpoint (repeatable)")->required();
  q->add_option("--bank", pt.bank)->required();
  q->add_option("--key", pt.key)->required();
  q->add_option("--data-dir", pt.data_dir)->required();
  q->add_option("--perms", pt.perms, "Number of random permutations")->capture_default_str();
  q->add_option("--seed", pt.seed)->capture_default_str();
  q->add_option("--T", pt.T)->capture_default_str();
  q->add_option("--out", pt.out)->required();
  q->add_option("--mask-threshold", pt.mask_threshold)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*s) cmd_simulate(sim, out);
    if (*p) cmd_pretrain_dict(pre, out);
    if (*t) cmd_train(tr, out);
    if (*r) cmd_reconstruct(rec, out);
    if (*e) cmd_evaluate(ev, out);
    if (*q) cmd_permute_test(pt, out);
  } catch (const IoError& ex) {
    err << "error: " << ex.what() << '\n';
    return kIo;
  } catch (const NumericalError& ex) {
    err << "numerical failure: " << ex.what() << '\n';
    return kNumerical;
  } catch (const Error& ex) {
    err << "error: " << ex.what() << '\n';
    return kUsage;
  } catch (const std::out_of_range& ex) {
    err << "error: " << ex.what() << '\n';
    return kUsage;
  } catch (const std::exception& ex) {
    err << "internal error: " << ex.what() << '\n';
    return kInternal;
  }
  return kOk;
}

}  // namespace cdl::cli
