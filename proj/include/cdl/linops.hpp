#pragma once

// Linear operators of the reconstruction problem: the low-resolution MRI
// forward model A = S F, the convolutional dictionary D and its adjoint, the
// composite B = A D, and a power-iteration estimate of ||B||^2.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cdl/detail/binary_io.hpp"
#include "cdl/detail/shift.hpp"
#include "cdl/errors.hpp"
#include "cdl/fft.hpp"
#include "cdl/rng.hpp"
#include "cdl/tensor.hpp"

namespace cdl {

struct ImageDomain {};
struct FrequencyDomain {};

/// Complex H x W grid stored as a [2,H,W] tensor: real plane, then imaginary plane.
template <class Domain>
class ComplexGrid {
 public:
  ComplexGrid() = default;
  ComplexGrid(std::size_t height, std::size_t width) : planes_(Shape{2, height, width}) {}
  explicit ComplexGrid(Tensor planes) : planes_(std::move(planes)) {
    if (planes_.rank() != 3 || planes_.dim(0) != 2) {
      throw ShapeError("channels", "complex grid needs [2,H,W], got " + shape_str(planes_.shape));
    }
  }

  std::size_t height() const { return planes_.dim(1); }
  std::size_t width() const { return planes_.dim(2); }
  std::size_t pixels() const { return height() * width(); }

  std::span<double> re() { return {planes_.data.data(), pixels()}; }
  std::span<double> im() { return {planes_.data.data() + pixels(), pixels()}; }
  std::span<const double> re() const { return {planes_.data.data(), pixels()}; }
  std::span<const double> im() const { return {planes_.data.data() + pixels(), pixels()}; }

  const Tensor& tensor() const noexcept { return planes_; }
  Tensor& tensor() noexcept { return planes_; }

  friend bool operator==(const ComplexGrid&, const ComplexGrid&) = default;

 private:
  Tensor planes_;
};

using ComplexImage = ComplexGrid<ImageDomain>;
/// k-space; DC sits at index (0, 0).
using KSpace = ComplexGrid<FrequencyDomain>;

inline long signed_frequency(std::size_t i, std::size_t n) {
  return static_cast<long>(i) < static_cast<long>((n + 1) / 2) ? static_cast<long>(i)
                                                                : static_cast<long>(i) - static_cast<long>(n);
}

/// Binary k-space sampling mask, symmetric about DC.
class LowResMask {
 public:
  LowResMask() = default;

  LowResMask(std::size_t height, std::size_t width, std::vector<std::uint8_t> keep)
      : height_(height), width_(width), keep_h_(height), keep_w_(width), bits_(std::move(keep)) {
    if (bits_.size() != height * width) throw ShapeError("mask", "mask buffer does not match grid");
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const std::size_t my = (height - y) % height, mx = (width - x) % width;
        if ((bits_[y * width + x] != 0) != (bits_[my * width + mx] != 0)) {
          throw ValueError("mask is not symmetric about DC");
        }
      }
  }

  /// Keeps frequencies with 2|f_y| <= keep_h and 2|f_x| <= keep_w.
  static LowResMask central(std::size_t height, std::size_t width, std::size_t keep_h, std::size_t keep_w) {
    if (keep_h > height || keep_w > width) throw ValueError("mask bandwidth exceeds the grid");
    LowResMask m;
    m.height_ = height;
    m.width_ = width;
    m.keep_h_ = keep_h;
    m.keep_w_ = keep_w;
    m.bits_.assign(height * width, 0);
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const long fy = std::abs(signed_frequency(y, height)), fx = std::abs(signed_frequency(x, width));
        m.bits_[y * width + x] = 2 * fy <= static_cast<long>(keep_h) && 2 * fx <= static_cast<long>(keep_w);
      }
    return m;
  }

  static LowResMask from_fraction(std::size_t height, std::size_t width, double keep_frac) {
    if (!(keep_frac > 0.0 && keep_frac <= 1.0)) throw ValueError("keep fraction must lie in (0, 1]");
    const auto kh = static_cast<std::size_t>(std::lround(keep_frac * static_cast<double>(height)));
    const auto kw = static_cast<std::size_t>(std::lround(keep_frac * static_cast<double>(width)));
    return central(height, width, kh, kw);
  }

  static LowResMask all_ones(std::size_t height, std::size_t width) {
    return central(height, width, height, width);
  }

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t keep_h() const noexcept { return keep_h_; }
  std::size_t keep_w() const noexcept { return keep_w_; }
  bool operator()(std::size_t y, std::size_t x) const { return bits_[y * width_ + x] != 0; }
  const std::vector<std::uint8_t>& bits() const noexcept { return bits_; }
  std::size_t retained() const { return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), 1)); }

  /// Masks are equal when they sample the same bins; the band extents are descriptive only.
  friend bool operator==(const LowResMask& a, const LowResMask& b) {
    return a.height_ == b.height_ && a.width_ == b.width_ && a.bits_ == b.bits_;
  }

 private:
  std::size_t height_ = 0, width_ = 0, keep_h_ = 0, keep_w_ = 0;
  std::vector<std::uint8_t> bits_;
};

// ---------------------------------------------------------------------------
// Forward model A = S F
// ---------------------------------------------------------------------------

namespace detail {

inline void check_grid(const Tensor& t, const LowResMask& mask, const char* what) {
  if (t.rank() != 3 || t.dim(0) != 2) throw ShapeError("channels", std::string(what) + " needs [2,H,W]");
  if (t.dim(1) != mask.height()) throw ShapeError("H", std::string(what) + ": image height differs from mask");
  if (t.dim(2) != mask.width()) throw ShapeError("W", std::string(what) + ": image width differs from mask");
  if (t.dim(1) % 2 || t.dim(2) % 2 || t.dim(1) > 1024 || t.dim(2) > 1024) {
    throw ShapeError("H/W", "image sides must be even and at most 1024");
  }
}

inline void apply_mask(Tensor& t, const LowResMask& mask) {
  const std::size_t n = mask.height() * mask.width();
  const auto& bits = mask.bits();
  for (std::size_t i = 0; i < n; ++i) {
    if (!bits[i]) t[i] = t[n + i] = 0.0;
  }
}

inline void fft2(Tensor& t, bool inverse) {
  const std::size_t h = t.dim(1), w = t.dim(2), n = h * w;
  fft::fft2_unitary(std::span<double>(t.data.data(), n), std::span<double>(t.data.data() + n, n), h, w, inverse);
}

}  // namespace detail

inline Tensor forward_A(const Tensor& x, const LowResMask& mask) {
  detail::check_grid(x, mask, "forward_A");
  Tensor y = x;
  detail::fft2(y, false);
  detail::apply_mask(y, mask);
  return y;
}

inline Tensor adjoint_A(const Tensor& y, const LowResMask& mask) {
  detail::check_grid(y, mask, "adjoint_A");
  Tensor x = y;
  detail::apply_mask(x, mask);
  detail::fft2(x, true);
  return x;
}

/// A^H A: projection onto the retained band.
inline Tensor normal_A(const Tensor& x, const LowResMask& mask) { return adjoint_A(forward_A(x, mask), mask); }

inline KSpace forward_A(const ComplexImage& x, const LowResMask& mask) {
  return KSpace(forward_A(x.tensor(), mask));
}

inline ComplexImage adjoint_A(const KSpace& y, const LowResMask& mask) {
  return ComplexImage(adjoint_A(y.tensor(), mask));
}

// ---------------------------------------------------------------------------
// Convolutional dictionary
// ---------------------------------------------------------------------------

struct DictionaryMeta {
  double beta = 0.25;
  double lambda = 0.0;
  std::string corpus;
  std::string created;

  friend bool operator==(const DictionaryMeta&, const DictionaryMeta&) = default;
};

/// K real k_f x k_f filters, row-major, filter after filter.
class Dictionary {
 public:
  Dictionary() = default;

  Dictionary(std::size_t K, std::size_t kf, std::vector<double> filters, DictionaryMeta meta = {})
      : K_(K), kf_(kf), filters_(std::move(filters)), meta_(std::move(meta)) {
    if (K == 0) throw ValueError("dictionary needs at least one filter");
    if (kf % 2 == 0) throw ShapeError("k_f", "filter side must be odd, got " + std::to_string(kf));
    if (filters_.size() != K * kf * kf) throw ShapeError("filters", "expected K*k_f*k_f values");
  }

  /// Single centred delta filter: D is the identity.
  static Dictionary delta(std::size_t kf = 1) {
    std::vector<double> f(kf * kf, 0.0);
    f[(kf / 2) * kf + kf / 2] = 1.0;
    return Dictionary(1, kf, std::move(f));
  }

  std::size_t K() const noexcept { return K_; }
  std::size_t kf() const noexcept { return kf_; }
  const DictionaryMeta& meta() const noexcept { return meta_; }
  DictionaryMeta& meta() noexcept { return meta_; }
  const std::vector<double>& filters() const noexcept { return filters_; }

  std::span<const double> filter(std::size_t k) const { return {filters_.data() + k * kf_ * kf_, kf_ * kf_}; }
  std::span<double> filter(std::size_t k) { return {filters_.data() + k * kf_ * kf_, kf_ * kf_}; }

  double filter_norm(std::size_t k) const {
    double s = 0.0;
    for (double v : filter(k)) s += v * v;
    return std::sqrt(s);
  }

  void validate_unit_norm(double tol = 1e-8) const {
    for (std::size_t k = 0; k < K_; ++k) {
      if (std::abs(filter_norm(k) - 1.0) > tol) {
        throw ValueError("filter " + std::to_string(k) + " is not unit norm");
      }
    }
  }

  /// Filter i of the result is filter perm[i] of this dictionary.
  Dictionary permuted(const std::vector<std::size_t>& perm) const {
    if (perm.size() != K_) throw ShapeError("K", "permutation length differs from K");
    std::vector<double> out;
    out.reserve(filters_.size());
    for (std::size_t k : perm) {
      auto f = filter(k);
      out.insert(out.end(), f.begin(), f.end());
    }
    return Dictionary(K_, kf_, std::move(out), meta_);
  }

  Dictionary scaled(double c) const {
    std::vector<double> out = filters_;
    for (double& v : out) v *= c;
    return Dictionary(K_, kf_, std::move(out), meta_);
  }

  std::string key() const;

  friend bool operator==(const Dictionary&, const Dictionary&) = default;

 private:
  std::size_t K_ = 0, kf_ = 0;
  std::vector<double> filters_;
  DictionaryMeta meta_;
};

/// Bank key of a (K, k_f, lambda, beta) configuration, e.g. "K8_kf7_lam0.5_beta0.25".
inline std::string dictionary_key(std::size_t K, std::size_t kf, double lambda, double beta) {
  std::ostringstream os;
  os << "K" << K << "_kf" << kf << "_lam" << lambda << "_beta" << beta;
  return os.str();
}

inline std::string Dictionary::key() const { return dictionary_key(K_, kf_, meta_.lambda, meta_.beta); }

inline nlohmann::json to_json(const DictionaryMeta& m) {
  return {{"beta", m.beta}, {"lambda", m.lambda}, {"corpus", m.corpus}, {"created", m.created}};
}

inline DictionaryMeta meta_from_json(const nlohmann::json& j) {
  DictionaryMeta m;
  m.beta = j.at("beta").get<double>();
  m.lambda = j.at("lambda").get<double>();
  m.corpus = j.value("corpus", "");
  m.created = j.value("created", "");
  return m;
}

/// "CDLD" | u32 version=1 | u32 K | u32 k_f | K*k_f*k_f f64 | u32 len + JSON metadata. Little-endian.
inline void write_dictionary(std::ostream& os, const Dictionary& d) {
  detail::write_magic(os, "CDLD");
  detail::write_u32(os, 1);
  detail::write_u32(os, static_cast<std::uint32_t>(d.K()));
  detail::write_u32(os, static_cast<std::uint32_t>(d.kf()));
  for (double v : d.filters()) detail::write_f64(os, v);
  detail::write_string(os, to_json(d.meta()).dump());
}

inline Dictionary read_dictionary(std::istream& is) {
  detail::expect_magic(is, "CDLD");
  const auto version = detail::read_u32(is);
  if (version != 1) throw IoError("unsupported dictionary version " + std::to_string(version));
  const std::size_t K = detail::read_u32(is), kf = detail::read_u32(is);
  if (K == 0 || kf == 0 || K * kf * kf > (std::size_t{1} << 28)) throw IoError("implausible dictionary header");
  std::vector<double> f(K * kf * kf);
  for (double& v : f) v = detail::read_f64(is);
  DictionaryMeta meta;
  try {
    meta = meta_from_json(nlohmann::json::parse(detail::read_string(is)));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("dictionary metadata: ") + e.what());
  }
  return Dictionary(K, kf, std::move(f), std::move(meta));
}

inline void save_dictionary(const std::filesystem::path& path, const Dictionary& d) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_dictionary(os, d);
  if (!os) throw IoError("write failed: " + path.string());
}

inline Dictionary load_dictionary(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_dictionary(is);
}

/// K complex feature maps as a [K,2,H,W] tensor (Re_k, Im_k pairs).
struct CoefficientStack {
  Tensor coeffs;

  CoefficientStack() = default;
  CoefficientStack(std::size_t K, std::size_t h, std::size_t w) : coeffs(Shape{K, 2, h, w}) {}
  explicit CoefficientStack(Tensor t) : coeffs(std::move(t)) {
    if (coeffs.rank() != 4 || coeffs.dim(1) != 2) {
      throw ShapeError("channels", "coefficient stack needs [K,2,H,W], got " + shape_str(coeffs.shape));
    }
  }
  std::size_t K() const { return coeffs.dim(0); }
};

namespace detail {

inline void check_stack(const Tensor& s, const Dictionary& d) {
  if (s.rank() != 4 || s.dim(1) != 2) throw ShapeError("channels", "coefficients must be [K,2,H,W]");
  if (s.dim(0) != d.K()) {
    throw ShapeError("K", "stack has " + std::to_string(s.dim(0)) + " maps, dictionary " + std::to_string(d.K()));
  }
  if (s.dim(2) < d.kf() || s.dim(3) < d.kf()) throw ShapeError("H/W", "image smaller than dictionary filters");
}

}  // namespace detail

/// D s = sum_k d_k * s_k on both channels, circular boundary.
inline Tensor dict_synthesize(const Tensor& s, const Dictionary& d) {
  detail::check_stack(s, d);
  const std::size_t K = d.K(), kf = d.kf(), h = s.dim(2), w = s.dim(3), plane = h * w;
  const long r = static_cast<long>(kf / 2);
  Tensor out(Shape{2, h, w});
  for (std::size_t k = 0; k < K; ++k) {
    const auto f = d.filter(k);
    for (std::size_t ch = 0; ch < 2; ++ch) {
      const double* src = s.data.data() + (k * 2 + ch) * plane;
      double* dst = out.data.data() + ch * plane;
      for (std::size_t i = 0; i < kf; ++i)
        for (std::size_t j = 0; j < kf; ++j)
          detail::shift_axpy(f[i * kf + j], src, dst, static_cast<long>(h), static_cast<long>(w),
                             r - static_cast<long>(i), r - static_cast<long>(j), Padding::circular);
    }
  }
  return out;
}

/// D^T x: correlation of each channel with every filter. Exact adjoint of dict_synthesize.
inline Tensor dict_analyze(const Tensor& x, const Dictionary& d) {
  if (x.rank() != 3 || x.dim(0) != 2) throw ShapeError("channels", "dict_analyze needs [2,H,W]");
  const std::size_t K = d.K(), kf = d.kf(), h = x.dim(1), w = x.dim(2), plane = h * w;
  if (h < kf || w < kf) throw ShapeError("H/W", "image smaller than dictionary filters");
  const long r = static_cast<long>(kf / 2);
  Tensor out(Shape{K, 2, h, w});
  for (std::size_t k = 0; k < K; ++k) {
    const auto f = d.filter(k);
    for (std::size_t ch = 0; ch < 2; ++ch) {
      const double* src = x.data.data() + ch * plane;
      double* dst = out.data.data() + (k * 2 + ch) * plane;
      for (std::size_t i = 0; i < kf; ++i)
        for (std::size_t j = 0; j < kf; ++j)
          detail::shift_axpy(f[i * kf + j], src, dst, static_cast<long>(h), static_cast<long>(w),
                             static_cast<long>(i) - r, static_cast<long>(j) - r, Padding::circular);
    }
  }
  return out;
}

inline ComplexImage dict_synthesize(const CoefficientStack& s, const Dictionary& d) {
  return ComplexImage(dict_synthesize(s.coeffs, d));
}

inline CoefficientStack dict_analyze(const ComplexImage& x, const Dictionary& d) {
  return CoefficientStack(dict_analyze(x.tensor(), d));
}

/// B s = A D s
inline Tensor apply_B(const Tensor& s, const Dictionary& d, const LowResMask& mask) {
  return forward_A(dict_synthesize(s, d), mask);
}

/// B^H y = D^T A^H y
inline Tensor adjoint_B(const Tensor& y, const Dictionary& d, const LowResMask& mask) {
  return dict_analyze(adjoint_A(y, mask), d);
}

inline double dot(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ShapeError("numel", "dot of differently sized tensors");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(const Tensor& a) { return std::sqrt(dot(a, a)); }

/// Power-iteration estimate of ||B||^2 = lambda_max(B^H B).
///
/// The start vector is D^T z for a seeded Gaussian image z. That keeps the
/// iterate in range(D^T), where the top eigenvector lives, and makes the
/// estimate equivariant under filter permutations of D.
inline double operator_norm_sq(const Dictionary& d, const LowResMask& mask, std::size_t iters, std::uint64_t seed) {
  if (iters == 0) throw ValueError("operator_norm_sq needs at least one iteration");
  auto rng = SeedStream(seed).engine("power_iteration");
  std::normal_distribution<double> gauss(0.0, 1.0);
  Tensor z(Shape{2, mask.height(), mask.width()});
  for (double& v : z.data) v = gauss(rng);
  Tensor x = dict_analyze(z, d);
  double rq = 0.0;
  for (std::size_t it = 1; it <= iters; ++it) {
    const double nx = norm2(x);
    if (nx == 0.0) return 0.0;
    for (double& v : x.data) v /= nx;
    Tensor mx = dict_analyze(normal_A(dict_synthesize(x, d), mask), d);
    rq = dot(x, mx);
    x = std::move(mx);
  }
  return rq;
}

}  // namespace cdl
