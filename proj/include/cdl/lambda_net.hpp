#pragma once

// Lambda-map estimators: a small U-Net u, a global scalar t > 0, and the three
// input/output contracts
//   V1: Lambda = t softplus(u(X0)),               u: 2 -> K
//   V2: Lambda = t softplus(u(D^T X0)),           u: 2K -> K (interleaved Re_k, Im_k)
//   V3: Lambda = R^-1 t softplus(u(R D^T X0)),    u: 2 -> 1 applied per filter

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <random>
#include <string>
#include <vector>

#include "cdl/autodiff.hpp"
#include "cdl/detail/binary_io.hpp"
#include "cdl/fista.hpp"
#include "cdl/linops.hpp"
#include "cdl/rng.hpp"

namespace cdl {

struct UNetArch {
  std::size_t in_channels = 2;
  std::size_t out_channels = 1;
  std::vector<std::size_t> widths{16, 32, 64};
  std::size_t kernel = 3;
  double slope = 0.01;

  std::size_t depth() const { return widths.size(); }

  void validate() const {
    if (in_channels == 0 || out_channels == 0) throw ValueError("unet: channel counts must be positive");
    if (widths.empty()) throw ValueError("unet: need at least one level");
    for (std::size_t w : widths) {
      if (w == 0) throw ValueError("unet: zero-width level");
    }
    if (kernel % 2 == 0) throw ValueError("unet: kernel side must be odd");
  }

  friend bool operator==(const UNetArch&, const UNetArch&) = default;
};

inline nlohmann::json to_json(const UNetArch& a) {
  return {{"in_channels", a.in_channels}, {"out_channels", a.out_channels}, {"widths", a.widths},
          {"kernel", a.kernel}, {"slope", a.slope}};
}

inline UNetArch arch_from_json(const nlohmann::json& j) {
  try {
    UNetArch a;
    a.in_channels = j.at("in_channels").get<std::size_t>();
    a.out_channels = j.at("out_channels").get<std::size_t>();
    a.widths = j.at("widths").get<std::vector<std::size_t>>();
    a.kernel = j.at("kernel").get<std::size_t>();
    a.slope = j.at("slope").get<double>();
    a.validate();
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("bad architecture descriptor: ") + e.what());
  }
}

/// Encoder-decoder with skip concatenation. Each encoder level applies two
/// conv + leaky-relu blocks and (except the last) 2x2 average pooling; each
/// decoder level upsamples, convolves, concatenates the skip, and convolves
/// again. A final 1x1 convolution maps to the output channels.
/// Parameters are stored as alternating (kernel [O,C,k,k], bias [O]) tensors.
class UNet {
 public:
  UNet() = default;

  static UNet init(const UNetArch& arch, std::uint64_t seed) {
    arch.validate();
    UNet net;
    net.arch_ = arch;
    auto rng = SeedStream(seed).engine("unet_init");
    for (const auto& [cout, cin, k] : layer_shapes(arch)) {
      const double bound = std::sqrt(6.0 / static_cast<double>(cin * k * k));
      std::uniform_real_distribution<double> u(-bound, bound);
      Tensor kern(Shape{cout, cin, k, k});
      for (double& v : kern.data) v = u(rng);
      net.params_.push_back(std::move(kern));
      net.params_.emplace_back(Shape{cout});
    }
    return net;
  }

  static UNet from_params(const UNetArch& arch, std::vector<Tensor> params) {
    arch.validate();
    const auto shapes = layer_shapes(arch);
    if (params.size() != 2 * shapes.size()) throw ShapeError("layers", "unet parameter list has wrong length");
    for (std::size_t l = 0; l < shapes.size(); ++l) {
      const auto& [cout, cin, k] = shapes[l];
      require_shape(params[2 * l], Shape{cout, cin, k, k}, "unet kernel");
      require_shape(params[2 * l + 1], Shape{cout}, "unet bias");
    }
    UNet net;
    net.arch_ = arch;
    net.params_ = std::move(params);
    return net;
  }

  const UNetArch& arch() const noexcept { return arch_; }
  const std::vector<Tensor>& params() const noexcept { return params_; }
  std::vector<Tensor>& params() noexcept { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  /// x: [N, in_channels, H, W] with H, W divisible by 2^(depth-1).
  ad::Var forward(const ad::Var& x, const std::vector<ad::Var>& p) const {
    if (p.size() != params_.size()) throw ShapeError("layers", "unet forward: parameter count mismatch");
    if (x.shape().size() != 4) throw ShapeError("rank", "unet input must be [N,C,H,W], got " + shape_str(x.shape()));
    if (x.shape()[1] != arch_.in_channels) {
      throw ShapeError("C_in", "unet expects " + std::to_string(arch_.in_channels) + " input channels, got " +
                                   std::to_string(x.shape()[1]));
    }
    const std::size_t f = std::size_t{1} << (arch_.depth() - 1);
    if (x.shape()[2] % f || x.shape()[3] % f) {
      throw ShapeError("H/W", "unet input sides must be divisible by " + std::to_string(f));
    }

    std::size_t layer = 0;
    const auto conv = [&](const ad::Var& in) {
      const ad::Var out = ad::add_bias(ad::conv2d(in, p[2 * layer], Padding::zero), p[2 * layer + 1]);
      ++layer;
      return out;
    };
    const auto act = [&](const ad::Var& v) { return ad::leaky_relu(v, arch_.slope); };

    std::vector<ad::Var> skips;
    ad::Var h = x;
    for (std::size_t l = 0; l < arch_.depth(); ++l) {
      h = act(conv(act(conv(h))));
      if (l + 1 < arch_.depth()) {
        skips.push_back(h);
        h = ad::avg_pool2(h);
      }
    }
    for (std::size_t l = arch_.depth() - 1; l-- > 0;) {
      h = act(conv(ad::upsample2(h)));
      h = act(conv(ad::concat({h, skips[l]}, 1)));
    }
    return conv(h);
  }

 private:
  struct LayerShape {
    std::size_t cout, cin, k;
  };

  static std::vector<LayerShape> layer_shapes(const UNetArch& a) {
    std::vector<LayerShape> s;
    const auto& w = a.widths;
    for (std::size_t l = 0; l < a.depth(); ++l) {
      s.push_back({w[l], l == 0 ? a.in_channels : w[l - 1], a.kernel});
      s.push_back({w[l], w[l], a.kernel});
    }
    for (std::size_t l = a.depth() - 1; l-- > 0;) {
      s.push_back({w[l], w[l + 1], a.kernel});
      s.push_back({w[l], 2 * w[l], a.kernel});
    }
    s.push_back({a.out_channels, w[0], 1});
    return s;
  }

  UNetArch arch_;
  std::vector<Tensor> params_;
};

enum class Variant : std::uint8_t { v1 = 1, v2 = 2, v3 = 3 };

inline std::string to_string(Variant v) { return "v" + std::to_string(static_cast<int>(v)); }

inline Variant parse_variant(const std::string& s) {
  if (s == "v1" || s == "V1") return Variant::v1;
  if (s == "v2" || s == "V2") return Variant::v2;
  if (s == "v3" || s == "V3") return Variant::v3;
  throw ValueError("unknown estimator variant '" + s + "' (expected v1, v2 or v3)");
}

/// Differentiable handles on an estimator's parameters.
struct EstimatorVars {
  std::vector<ad::Var> net;
  ad::Var t;
};

inline constexpr double kMinScalarT = 1e-6;

class LambdaEstimator {
 public:
  LambdaEstimator() = default;

  /// K is the fixed filter count for V1/V2 and ignored for V3.
  static LambdaEstimator create(Variant variant, std::size_t K, std::vector<std::size_t> widths,
                                std::uint64_t seed, double t_init = 1.0) {
    UNetArch arch;
    arch.widths = std::move(widths);
    switch (variant) {
      case Variant::v1: arch.in_channels = 2, arch.out_channels = K; break;
      case Variant::v2: arch.in_channels = 2 * K, arch.out_channels = K; break;
      case Variant::v3: arch.in_channels = 2, arch.out_channels = 1; break;
    }
    if (variant != Variant::v3 && K == 0) throw ValueError("estimator: K must be positive");
    LambdaEstimator e;
    e.variant_ = variant;
    e.unet_ = UNet::init(arch, SeedStream(seed).derive("lambda_estimator"));
    if (!(t_init > 0.0) || !std::isfinite(t_init)) throw ValueError("estimator: t must be positive and finite");
    e.set_t(t_init);
    return e;
  }

  static LambdaEstimator from_parts(Variant variant, UNet unet, double t) {
    const auto& a = unet.arch();
    const bool ok = variant == Variant::v3   ? a.in_channels == 2 && a.out_channels == 1
                    : variant == Variant::v1 ? a.in_channels == 2
                                             : a.in_channels == 2 * a.out_channels;
    if (!ok) throw ShapeError("channels", "architecture does not match the " + to_string(variant) + " contract");
    if (!(t > 0.0) || !std::isfinite(t)) throw ValueError("estimator: t must be positive and finite");
    LambdaEstimator e;
    e.variant_ = variant;
    e.unet_ = std::move(unet);
    e.t_ = t;
    return e;
  }

  Variant variant() const noexcept { return variant_; }
  const UNet& unet() const noexcept { return unet_; }
  UNet& unet() noexcept { return unet_; }
  double t() const noexcept { return t_; }
  void set_t(double t) { t_ = std::max(t, kMinScalarT); }

  /// Fixed K of a V1/V2 head; 0 for the K-agnostic V3.
  std::size_t fixed_K() const { return variant_ == Variant::v3 ? 0 : unet_.arch().out_channels; }

  std::size_t parameter_count() const { return unet_.parameter_count() + 1; }

  EstimatorVars constants() const {
    EstimatorVars v;
    for (const auto& p : unet_.params()) v.net.emplace_back(p);
    v.t = ad::Var(Tensor::scalar(t_));
    return v;
  }

  EstimatorVars leaves(ad::Tape& tape) const {
    EstimatorVars v;
    for (const auto& p : unet_.params()) v.net.push_back(tape.leaf(p));
    v.t = tape.leaf(Tensor::scalar(t_));
    return v;
  }

  /// Lambda maps [K,H,W] as a differentiable function of the parameters.
  ad::Var estimate(const ComplexImage& x0, const Dictionary& d, const EstimatorVars& p) const {
    const std::size_t h = x0.height(), w = x0.width(), K = d.K();
    if (variant_ != Variant::v3 && K != fixed_K()) {
      throw ShapeError("K", to_string(variant_) + " estimator was built for K=" + std::to_string(fixed_K()) +
                                " but the dictionary has K=" + std::to_string(K));
    }
    ad::Var u;
    switch (variant_) {
      case Variant::v1:
        u = unet_.forward(ad::Var(Tensor(Shape{1, 2, h, w}, x0.tensor().data)), p.net);
        break;
      case Variant::v2:
        u = unet_.forward(ad::Var(Tensor(Shape{1, 2 * K, h, w}, dict_analyze(x0.tensor(), d).data)), p.net);
        break;
      case Variant::v3:
        // R: [K,2,H,W] coefficient pairs become a batch of K two-channel images.
        u = unet_.forward(ad::Var(dict_analyze(x0.tensor(), d)), p.net);
        break;
    }
    return ad::mul(ad::softplus(ad::reshape(u, Shape{K, h, w})), p.t);
  }

  LambdaMaps estimate(const ComplexImage& x0, const Dictionary& d) const {
    return LambdaMaps(estimate(x0, d, constants()).value());
  }

  /// Writes trained values back from a flat list matching leaves() order.
  void assign(const std::vector<Tensor>& net, double t) {
    if (net.size() != unet_.params().size()) throw ShapeError("layers", "estimator assign: parameter count");
    for (std::size_t i = 0; i < net.size(); ++i) {
      require_shape(net[i], unet_.params()[i].shape, "estimator parameter");
      unet_.params()[i] = net[i];
    }
    set_t(t);
  }

  friend bool operator==(const LambdaEstimator& a, const LambdaEstimator& b) {
    return a.variant_ == b.variant_ && a.unet_.arch() == b.unet_.arch() && a.unet_.params() == b.unet_.params() &&
           a.t_ == b.t_;
  }

 private:
  Variant variant_ = Variant::v3;
  UNet unet_;
  double t_ = 1.0;
};

inline LambdaMaps estimate_v1(const LambdaEstimator& est, const ComplexImage& x0, std::size_t K) {
  if (est.variant() != Variant::v1) throw ValueError("estimate_v1 needs a V1 estimator");
  if (K != est.fixed_K()) {
    throw ShapeError("K", "V1 head produces " + std::to_string(est.fixed_K()) + " maps, asked for " + std::to_string(K));
  }
  // D does not enter V1; a placeholder of the right K satisfies the shared interface.
  return est.estimate(x0, Dictionary(K, 1, std::vector<double>(K, 1.0)));
}

inline LambdaMaps estimate_v2(const LambdaEstimator& est, const ComplexImage& x0, const Dictionary& d) {
  if (est.variant() != Variant::v2) throw ValueError("estimate_v2 needs a V2 estimator");
  return est.estimate(x0, d);
}

inline LambdaMaps estimate_v3(const LambdaEstimator& est, const ComplexImage& x0, const Dictionary& d) {
  if (est.variant() != Variant::v3) throw ValueError("estimate_v3 needs a V3 estimator");
  return est.estimate(x0, d);
}

// ---------------------------------------------------------------------------
// Checkpoint: "CDLN" | u32 version | u8 variant | u32 len + JSON architecture |
//             u64 parameter count | f64 parameters (network, then t)
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_estimator(std::ostream& os, const LambdaEstimator& e) {
  detail::write_magic(os, "CDLN");
  detail::write_u32(os, kCheckpointVersion);
  detail::write_u8(os, static_cast<std::uint8_t>(e.variant()));
  detail::write_string(os, to_json(e.unet().arch()).dump());
  detail::write_u64(os, e.parameter_count());
  for (const auto& p : e.unet().params())
    for (double v : p.data) detail::write_f64(os, v);
  detail::write_f64(os, e.t());
  if (!os) throw IoError("failed writing estimator checkpoint");
}

inline LambdaEstimator read_estimator(std::istream& is) {
  detail::expect_magic(is, "CDLN");
  const std::uint32_t version = detail::read_u32(is);
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const std::uint8_t raw = detail::read_u8(is);
  if (raw < 1 || raw > 3) throw IoError("checkpoint: unknown variant tag " + std::to_string(raw));
  const auto variant = static_cast<Variant>(raw);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_string(is));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("checkpoint: bad architecture JSON: ") + e.what());
  }
  const UNetArch arch = arch_from_json(j);
  UNet shape_only = UNet::init(arch, 0);
  const std::uint64_t count = detail::read_u64(is);
  if (count != shape_only.parameter_count() + 1) throw IoError("checkpoint: parameter count does not match architecture");
  for (auto& p : shape_only.params())
    for (double& v : p.data) v = detail::read_f64(is);
  const double t = detail::read_f64(is);
  try {
    return LambdaEstimator::from_parts(variant, std::move(shape_only), t);
  } catch (const Error& e) {
    throw IoError(std::string("checkpoint: ") + e.what());
  }
}

inline void save_estimator(const std::filesystem::path& path, const LambdaEstimator& e) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open '" + path.string() + "' for writing");
  write_estimator(os, e);
}

inline LambdaEstimator load_estimator(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  return read_estimator(is);
}

}  // namespace cdl
