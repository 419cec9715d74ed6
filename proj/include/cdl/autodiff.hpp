#pragma once

// Reverse-mode automatic differentiation over dense f64 tensors.
//
// A Var is an immutable value plus an optional handle into a Tape. Ops on
// untracked Vars only compute values; as soon as one input lives on a tape
// the result is recorded there together with its backward rule. The same op
// code therefore produces bitwise-identical forward values whether or not
// gradients are being tracked.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "cdl/detail/shift.hpp"
#include "cdl/errors.hpp"
#include "cdl/tensor.hpp"

namespace cdl::ad {

class Tape;

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value) : value_(std::make_shared<const Tensor>(std::move(value))) {}

  const Tensor& value() const { return *value_; }
  const Shape& shape() const { return value_->shape; }
  std::size_t size() const { return value_->size(); }
  bool defined() const noexcept { return static_cast<bool>(value_); }
  bool tracked() const noexcept { return tape_ != nullptr; }
  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }

 private:
  friend class Tape;
  std::shared_ptr<const Tensor> value_;
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

using BackwardFn =
    std::function<void(const Tensor& grad_out, const std::vector<bool>& needs, std::vector<Tensor>& grad_in)>;

/// Ordered record of operations. Node ids follow execution order, so replaying
/// backward rules from the loss id downwards is a valid reverse topological sweep.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value) {
    Var v(std::move(value));
    v.tape_ = this;
    v.id_ = nodes_.size();
    nodes_.push_back(Node{{}, {}, true});
    leaf_grads_.emplace_back();
    return v;
  }

  Var record(Tensor value, const std::vector<const Var*>& inputs, BackwardFn backward) {
    Var v(std::move(value));
    v.tape_ = this;
    v.id_ = nodes_.size();
    Node node{{}, std::move(backward), false};
    node.inputs.reserve(inputs.size());
    for (const Var* in : inputs) node.inputs.push_back(in->tracked() ? in->id() : kNone);
    nodes_.push_back(std::move(node));
    leaf_grads_.emplace_back();
    return v;
  }

  /// Accumulates d(loss)/d(leaf) into every leaf reachable from `loss`.
  void backward(const Var& loss) {
    if (loss.tape() != this) throw ValueError("backward: loss is not recorded on this tape");
    if (loss.size() != 1) throw ShapeError("loss", "backward needs a scalar, got " + shape_str(loss.shape()));
    std::vector<Tensor> grads(nodes_.size());
    grads[loss.id()] = Tensor(loss.shape(), 1.0);
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      if (grads[id].empty()) continue;
      Node& node = nodes_[id];
      if (node.leaf) {
        accumulate(leaf_grads_[id], grads[id]);
        grads[id] = Tensor();
        continue;
      }
      std::vector<bool> needs(node.inputs.size());
      bool any = false;
      for (std::size_t i = 0; i < node.inputs.size(); ++i) any |= needs[i] = node.inputs[i] != kNone;
      if (any) {
        std::vector<Tensor> grad_in(node.inputs.size());
        node.backward(grads[id], needs, grad_in);
        for (std::size_t i = 0; i < node.inputs.size(); ++i) {
          if (needs[i] && !grad_in[i].empty()) accumulate(grads[node.inputs[i]], grad_in[i]);
        }
      }
      grads[id] = Tensor();
    }
  }

  /// Gradient accumulated on a leaf; zero-sized until the first backward reaches it.
  const Tensor& grad(const Var& v) const {
    if (v.tape() != this || !nodes_[v.id()].leaf) throw ValueError("grad: variable is not a leaf of this tape");
    return leaf_grads_[v.id()];
  }

  Tensor grad_or_zeros(const Var& v) const {
    const Tensor& g = grad(v);
    return g.empty() ? Tensor(v.shape()) : g;
  }

  void zero_grad() {
    for (auto& g : leaf_grads_) g = Tensor();
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

  struct Node {
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool leaf;
  };

  static void accumulate(Tensor& dst, const Tensor& src) {
    if (dst.empty()) {
      dst = src;
      return;
    }
    if (dst.shape != src.shape) throw ShapeError("grad", shape_str(dst.shape) + " vs " + shape_str(src.shape));
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> leaf_grads_;
};

/// Records the on/off pattern of every kink-bearing op (soft_threshold, relu,
/// leaky_relu) evaluated on this thread while alive. Finite-difference checks
/// compare digests to detect perturbations that cross a kink.
class PatternProbe {
 public:
  PatternProbe() : prev_(current()) { current() = this; }
  ~PatternProbe() { current() = prev_; }
  PatternProbe(const PatternProbe&) = delete;
  PatternProbe& operator=(const PatternProbe&) = delete;

  std::uint64_t digest() const noexcept { return hash_; }
  std::size_t count() const noexcept { return count_; }

  void mix(bool bit) noexcept {
    hash_ = (hash_ ^ (bit ? 0x9fULL : 0x35ULL)) * 0x100000001b3ULL;
    ++count_;
  }

  static PatternProbe*& current() {
    thread_local PatternProbe* probe = nullptr;
    return probe;
  }

 private:
  PatternProbe* prev_;
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
  std::size_t count_ = 0;
};

namespace detail {

inline Var make_result(Tensor out, const std::vector<const Var*>& inputs, BackwardFn backward) {
  Tape* tape = nullptr;
  for (const Var* in : inputs) {
    if (!in->defined()) throw ValueError("op applied to an undefined Var");
    if (!in->tracked()) continue;
    if (tape && tape != in->tape()) throw ValueError("op mixes variables from different tapes");
    tape = in->tape();
  }
  if (!tape) return Var(std::move(out));
  return tape->record(std::move(out), inputs, std::move(backward));
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("dim " + std::to_string(i),
                       "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  const std::size_t r = out.size();
  std::vector<std::size_t> strides(r, 0);
  std::size_t stride = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t d = in.size() - 1 - k;
    const std::size_t o = r - 1 - k;
    if (in[d] != 1) strides[o] = stride;
    stride *= in[d];
  }
  return strides;
}

// Calls f(i_out, i_a, i_b) for every element of the broadcast output.
template <class F>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, F&& f) {
  const std::size_t n = numel(out);
  if (a == out && b == out) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t r = out.size();
  const auto sa = broadcast_strides(a, out);
  const auto sb = broadcast_strides(b, out);
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

inline Tensor reduce_to(const Tensor& g, const Shape& in) {
  if (g.shape == in) return g;
  Tensor r(in);
  for_each_broadcast(g.shape, in, in, [&](std::size_t i, std::size_t j, std::size_t) { r[j] += g[i]; });
  return r;
}

template <class F>
Tensor broadcast_apply(const Tensor& a, const Tensor& b, F&& f) {
  Tensor out(broadcast_shape(a.shape, b.shape));
  for_each_broadcast(out.shape, a.shape, b.shape,
                     [&](std::size_t i, std::size_t ia, std::size_t ib) { out[i] = f(a[ia], b[ib]); });
  return out;
}

template <class F>
Tensor map(const Tensor& a, F&& f) {
  Tensor out(a.shape);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

struct Nchw {
  std::size_t n, c, h, w;
};

inline Nchw as_nchw(const Shape& s, const char* op) {
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  throw ShapeError("rank", std::string(op) + " expects [C,H,W] or [N,C,H,W], got " + shape_str(s));
}

inline Shape like_input(const Shape& in, std::size_t c, std::size_t h, std::size_t w) {
  if (in.size() == 4) return {in[0], c, h, w};
  return {c, h, w};
}

}  // namespace detail

inline Var constant(Tensor t) { return Var(std::move(t)); }

/// Same value, cut from the tape.
inline Var detach(const Var& v) { return Var(v.value()); }

// ---------------------------------------------------------------------------
// Elementwise arithmetic (numpy-style broadcasting)
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  Tensor out = detail::broadcast_apply(a.value(), b.value(), [](double x, double y) { return x + y; });
  const Shape sa = a.shape(), sb = b.shape();
  return detail::make_result(std::move(out), {&a, &b},
                             [sa, sb](const Tensor& g, const std::vector<bool>& needs, std::vector<Tensor>& gin) {
                               if (needs[0]) gin[0] = detail::reduce_to(g, sa);
                               if (needs[1]) gin[1] = detail::reduce_to(g, sb);
                             });
}

inline Var sub(const Var& a, const Var& b) {
  Tensor out = detail::broadcast_apply(a.value(), b.value(), [](double x, double y) { return x - y; });
  const Shape sa = a.shape(), sb = b.shape();
  return detail::make_result(std::move(out), {&a, &b},
                             [sa, sb](const Tensor& g, const std::vector<bool>& needs, std::vector<Tensor>& gin) {
                               if (needs[0]) gin[0] = detail::reduce_to(g, sa);
                               if (needs[1]) gin[1] = detail::reduce_to(detail::map(g, [](double v) { return -v; }), sb);
                             });
}

inline Var mul(const Var& a, const Var& b) {
  Tensor out = detail::broadcast_apply(a.value(), b.value(), [](double x, double y) { return x * y; });
  return detail::make_result(
      std::move(out), {&a, &b}, [a, b](const Tensor& g, const std::vector<bool>& needs, std::vector<Tensor>& gin) {
        const Tensor &av = a.value(), &bv = b.value();
        if (needs[0]) {
          Tensor ga(g.shape);
          detail::for_each_broadcast(g.shape, av.shape, bv.shape,
                                     [&](std::size_t i, std::size_t, std::size_t ib) { ga[i] = g[i] * bv[ib]; });
          gin[0] = detail::reduce_to(ga, av.shape);
        }
        if (needs[1]) {
          Tensor gb(g.shape);
          detail::for_each_broadcast(g.shape, av.shape, bv.shape,
                                     [&](std::size_t i, std::size_t ia, std::size_t) { gb[i] = g[i] * av[ia]; });
          gin[1] = detail::reduce_to(gb, bv.shape);
        }
      });
}

inline Var div(const Var& a, const Var& b) {
  Tensor out = detail::broadcast_apply(a.value(), b.value(), [](double x, double y) { return x / y; });
  return detail::make_result(
      std::move(out), {&a, &b}, [a, b](const Tensor& g, const std::vector<bool>& needs, std::vector<Tensor>& gin) {
        const Tensor &av = a.value(), &bv = b.value();
        if (needs[0]) {
          Tensor ga(g.shape);
          detail::for_each_broadcast(g.shape, av.shape, bv.shape,
                                     [&](std::size_t i, std::size_t, std::size_t ib) { ga[i] = g[i] / bv[ib]; });
          gin[0] = detail::reduce_to(ga, av.shape);
        }
        if (needs[1]) {
          Tensor gb(g.shape);
          detail::for_each_broadcast(g.shape, av.shape, bv.shape, [&](std::size_t i, std::size_t ia, std::size_t ib) {
            gb[i] = -g[i] * av[ia] / (bv[ib] * bv[ib]);
          });
          gin[1] = detail::reduce_to(gb, bv.shape);
        }
      });
}

inline Var neg(const Var& a) {
  return detail::make_result(detail::map(a.value(), [](double v) { return -v; }), {&a},
                             [](const Tensor& g, const std::vector<bool>&, std::vector<Tensor>& gin) {
                               gin[0] = detail::map(g, [](double v) { return -v; });
                             });
}

inline Var scale(const Var& a, double c) {
  return detail::make_result(detail::map(a.value(), [c](double v) { return c * v; }), {&a},
                             [c](const Tensor& g, const std::vector<bool>&, std::vector<Tensor>& gin) {
                               gin[0] = detail::map(g, [c](double v) { return c * v; });
                             });
}

inline Var add_scalar(const Var& a, double c) {
  return detail::make_result(detail::map(a.value(), [c](double v) { return v + c; }), {&a},
                             [](const Tensor& g, const std::vector<bool>&, std::vector<Tensor>& gin) { gin[0] = g; });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().data) s += v;
  const Shape sa = a.shape();
  return detail::make_result(Tensor::scalar(s), {&a},
                             [sa](const Tensor& g, const std::vector<bool>&, std::vector<Tensor>& gin) {
                               gin[0] = Tensor(sa, g[0]);
                             });
}

inline Var mean(const Var& a) {
  const double n = static_cast<double>(a.size());
  double s = 0.0;
  for (double v : a.value().data) s += v;
  const Shape sa = a.shape();
  return detail::make_result(Tensor::scalar(s / n), {&a},
                             [sa, n](const Tensor& g, const std::vector<bool>&, std::vector<Tensor>& gin) {
                               gin[0] = Tensor(sa, g[0] / n);
                             });
}

// ---------------------------------------------------------------------------
// Activations and proximal maps
// ---------------------------------------------------------------------------

/// log(1 + e^x), returns x above 30 and never underflows to zero.
inline double softplus(double x) {
  if (x > 30.0) return x;
  return std::max(std::log1p(std::exp(x)), std::numeric_limits<double>::min());
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Var softplus(const Var& a) {
  return detail::make_result(detail::map(a.value(), [](double v) { return softplus(v); }), {&a},
                             [a](const Tensor& g, const std::vector<bool>&, std::vector<Tensor>& gin) {
                               const Tensor& x = a.value();
                               Tensor r(g.shape);
                               for (std::size_t i = 0; i < g.size(); ++i) r[i] = g[i] * sigmoid(x[i]);
                               gin[0] = std::move(r);
                             });
}

inline Var leaky_relu(const Var& a, double slope) {
  const Tensor& x = a.value();
  if (auto* probe = PatternProbe::current()) {
    for (double v : x.data) probe->mix(v > 0);
  }
  return detail::make_result(detail::map(x, [slope](double v) { return v > 0 ? v : slope * v; }), {&a},
                             [a, slope](const Tensor& g, const std::vector<bool>&, std::vector<Tensor>& gin) {
                               const Tensor& xv = a.value();
                               Tensor r(g.shape);
                               for (std::size_t i = 0; i < g.size(); ++i) r[i] = xv[i] > 0 ? g[i] : slope * g[i];
                               gin[0] = std::move(r);
                             });
}

inline Var relu(const Var& a) { return leaky_relu(a, 0.0); }

inline double soft_threshold(double x, double tau) {
  const double m = std::abs(x) - tau;
  return m > 0 ? std::copysign(m, x) : 0.0;
}

/// sign(x) * max(|x| - tau, 0), tau broadcast to x. The backward rule uses the
/// zero subgradient at |x| == tau.
inline Var soft_threshold(const Var& x, const Var& tau) {
  const Tensor &xv = x.value(), &tv = tau.value();
  for (double t : tv.data) {
    if (!(t >= 0.0)) throw ValueError("soft_threshold: negative or NaN threshold");
  }
  Tensor out = detail::broadcast_apply(xv, tv, [](double v, double t) { return soft_threshold(v, t); });
  if (out.shape != xv.shape) {
    throw ShapeError("tau", "threshold " + shape_str(tv.shape) + " must broadcast into " + shape_str(xv.shape));
  }
  if (auto* probe = PatternProbe::current()) {
    detail::for_each_broadcast(xv.shape, xv.shape, tv.shape,
                               [&](std::size_t, std::size_t i, std::size_t j) { probe->mix(std::abs(xv[i]) > tv[j]); });
  }
  return detail::make_result(
      std::move(out), {&x, &tau}, [x, tau](const Tensor& g, const std::vector<bool>& needs, std::vector<Tensor>& gin) {
        const Tensor &xv = x.value(), &tv = tau.value();
        Tensor gx(g.shape), gt(g.shape);
        detail::for_each_broadcast(g.shape, xv.shape, tv.shape, [&](std::size_t i, std::size_t ix, std::size_t it) {
          if (std::abs(xv[ix]) > tv[it]) {
            gx[i] = g[i];
            gt[i] = xv[ix] > 0 ? -g[i] : g[i];
          }
        });
        if (needs[0]) gin[0] = std::move(gx);
        if (needs[1]) gin[1] = detail::reduce_to(gt, tv.shape);
      });
}

// ---------------------------------------------------------------------------
// Convolution and U-Net plumbing
// ---------------------------------------------------------------------------

/// "Same"-size 2D convolution. input [C_in,H,W] or [N,C_in,H,W], kernels
/// [C_out,C_in,k,k] with k odd; out[o] = sum_c kernel[o,c] * input[c].
inline Var conv2d(const Var& input, const Var& kernels, Padding padding) {
  const auto in = detail::as_nchw(input.shape(), "conv2d");
  const Shape& ks = kernels.shape();
  if (ks.size() != 4) throw ShapeError("kernel rank", "conv2d kernels must be [C_out,C_in,k,k], got " + shape_str(ks));
  if (ks[1] != in.c) {
    throw ShapeError("C_in", "input has " + std::to_string(in.c) + " channels, kernels expect " + std::to_string(ks[1]));
  }
  if (ks[2] != ks[3] || ks[2] % 2 == 0) throw ShapeError("k", "kernels must be square with odd side, got " + shape_str(ks));
  if (in.h < ks[2] || in.w < ks[2]) {
    throw ShapeError("H/W", "spatial size " + std::to_string(in.h) + "x" + std::to_string(in.w) +
                                " smaller than kernel " + std::to_string(ks[2]));
  }
  const std::size_t cout = ks[0], cin = ks[1], k = ks[2];
  const long r = static_cast<long>(k / 2), h = static_cast<long>(in.h), w = static_cast<long>(in.w);
  const std::size_t plane = in.h * in.w;

  Tensor out(detail::like_input(input.shape(), cout, in.h, in.w));
  const Tensor &x = input.value(), &kv = kernels.value();
  for (std::size_t n = 0; n < in.n; ++n)
    for (std::size_t o = 0; o < cout; ++o) {
      double* dst = out.data.data() + (n * cout + o) * plane;
      for (std::size_t c = 0; c < cin; ++c) {
        const double* src = x.data.data() + (n * cin + c) * plane;
        const double* kk = kv.data.data() + (o * cin + c) * k * k;
        for (std::size_t i = 0; i < k; ++i)
          for (std::size_t j = 0; j < k; ++j)
            cdl::detail::shift_axpy(kk[i * k + j], src, dst, h, w, r - static_cast<long>(i), r - static_cast<long>(j),
                                    padding);
      }
    }

  return detail::make_result(
      std::move(out), {&input, &kernels},
      [input, kernels, in, cout, cin, k, r, h, w, plane, padding](const Tensor& g, const std::vector<bool>& needs,
                                                                 std::vector<Tensor>& gin) {
        const Tensor &x = input.value(), &kv = kernels.value();
        if (needs[0]) {
          Tensor gx(x.shape);
          for (std::size_t n = 0; n < in.n; ++n)
            for (std::size_t o = 0; o < cout; ++o) {
              const double* go = g.data.data() + (n * cout + o) * plane;
              for (std::size_t c = 0; c < cin; ++c) {
                double* dst = gx.data.data() + (n * cin + c) * plane;
                const double* kk = kv.data.data() + (o * cin + c) * k * k;
                for (std::size_t i = 0; i < k; ++i)
                  for (std::size_t j = 0; j < k; ++j)
                    cdl::detail::shift_axpy(kk[i * k + j], go, dst, h, w, static_cast<long>(i) - r,
                                            static_cast<long>(j) - r, padding);
              }
            }
          gin[0] = std::move(gx);
        }
        if (needs[1]) {
          Tensor gk(kv.shape);
          for (std::size_t n = 0; n < in.n; ++n)
            for (std::size_t o = 0; o < cout; ++o) {
              const double* go = g.data.data() + (n * cout + o) * plane;
              for (std::size_t c = 0; c < cin; ++c) {
                const double* src = x.data.data() + (n * cin + c) * plane;
                double* kk = gk.data.data() + (o * cin + c) * k * k;
                for (std::size_t i = 0; i < k; ++i)
                  for (std::size_t j = 0; j < k; ++j)
                    kk[i * k + j] += cdl::detail::shift_dot(go, src, h, w, r - static_cast<long>(i),
                                                            r - static_cast<long>(j), padding);
              }
            }
          gin[1] = std::move(gk);
        }
      });
}

/// Adds a per-channel bias [C] to [C,H,W] or [N,C,H,W].
inline Var add_bias(const Var& input, const Var& bias) {
  const auto in = detail::as_nchw(input.shape(), "add_bias");
  if (bias.shape() != Shape{in.c}) {
    throw ShapeError("C", "bias " + shape_str(bias.shape()) + " for " + std::to_string(in.c) + " channels");
  }
  const std::size_t plane = in.h * in.w;
  Tensor out = input.value();
  const Tensor& b = bias.value();
  for (std::size_t n = 0; n < in.n; ++n)
    for (std::size_t c = 0; c < in.c; ++c) {
      double* p = out.data.data() + (n * in.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] += b[c];
    }
  return detail::make_result(std::move(out), {&input, &bias},
                             [in, plane](const Tensor& g, const std::vector<bool>& needs, std::vector<Tensor>& gin) {
                               if (needs[0]) gin[0] = g;
                               if (needs[1]) {
                                 Tensor gb(Shape{in.c});
                                 for (std::size_t n = 0; n < in.n; ++n)
                                   for (std::size_t c = 0; c < in.c; ++c) {
                                     const double* p = g.data.data() + (n * in.c + c) * plane;
                                     for (std::size_t i = 0; i < plane; ++i) gb[c] += p[i];
                                   }
                                 gin[1] = std::move(gb);
                               }
                             });
}

/// 2x2 average pooling; H and W must be even.
inline Var avg_pool2(const Var& input) {
  const auto in = detail::as_nchw(input.shape(), "avg_pool2");
  if (in.h % 2 || in.w % 2) throw ShapeError("H/W", "avg_pool2 needs even sides, got " + shape_str(input.shape()));
  const std::size_t oh = in.h / 2, ow = in.w / 2, planes = in.n * in.c;
  Tensor out(detail::like_input(input.shape(), in.c, oh, ow));
  const Tensor& x = input.value();
  for (std::size_t p = 0; p < planes; ++p) {
    const double* s = x.data.data() + p * in.h * in.w;
    double* d = out.data.data() + p * oh * ow;
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        const double* q = s + 2 * y * in.w + 2 * xx;
        d[y * ow + xx] = 0.25 * (q[0] + q[1] + q[in.w] + q[in.w + 1]);
      }
  }
  const Shape sin = input.shape();
  return detail::make_result(std::move(out), {&input},
                             [sin, in, oh, ow, planes](const Tensor& g, const std::vector<bool>&, std::vector<Tensor>& gin) {
                               Tensor gx(sin);
                               for (std::size_t p = 0; p < planes; ++p) {
                                 const double* s = g.data.data() + p * oh * ow;
                                 double* d = gx.data.data() + p * in.h * in.w;
                                 for (std::size_t y = 0; y < oh; ++y)
                                   for (std::size_t xx = 0; xx < ow; ++xx) {
                                     const double v = 0.25 * s[y * ow + xx];
                                     double* q = d + 2 * y * in.w + 2 * xx;
                                     q[0] += v;
                                     q[1] += v;
                                     q[in.w] += v;
                                     q[in.w + 1] += v;
                                   }
                               }
                               gin[0] = std::move(gx);
                             });
}

/// Nearest-neighbour 2x upsampling.
inline Var upsample2(const Var& input) {
  const auto in = detail::as_nchw(input.shape(), "upsample2");
  const std::size_t oh = in.h * 2, ow = in.w * 2, planes = in.n * in.c;
  Tensor out(detail::like_input(input.shape(), in.c, oh, ow));
  const Tensor& x = input.value();
  for (std::size_t p = 0; p < planes; ++p) {
    const double* s = x.data.data() + p * in.h * in.w;
    double* d = out.data.data() + p * oh * ow;
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) d[y * ow + xx] = s[(y / 2) * in.w + xx / 2];
  }
  const Shape sin = input.shape();
  return detail::make_result(std::move(out), {&input},
                             [sin, in, oh, ow, planes](const Tensor& g, const std::vector<bool>&, std::vector<Tensor>& gin) {
                               Tensor gx(sin);
                               for (std::size_t p = 0; p < planes; ++p) {
                                 const double* s = g.data.data() + p * oh * ow;
                                 double* d = gx.data.data() + p * in.h * in.w;
                                 for (std::size_t y = 0; y < oh; ++y)
                                   for (std::size_t xx = 0; xx < ow; ++xx) d[(y / 2) * in.w + xx / 2] += s[y * ow + xx];
                               }
                               gin[0] = std::move(gx);
                             });
}

/// Concatenates along `axis`; all other dims must agree.
inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ValueError("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("axis", "concat axis " + std::to_string(axis) + " out of range");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw ShapeError("rank", "concat rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != s0[d]) {
        throw ShapeError("dim " + std::to_string(d), "concat " + shape_str(s) + " vs " + shape_str(s0));
      }
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];

  Tensor out(out_shape);
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  const std::size_t row = out_shape[axis] * inner;
  for (const Var& p : parts) {
    const std::size_t width = p.shape()[axis] * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p.value().data.data() + o * width, width, out.data.data() + o * row + offset);
    widths.push_back(width);
    offset += width;
  }
  std::vector<const Var*> inputs;
  std::vector<Shape> shapes;
  for (const Var& p : parts) {
    inputs.push_back(&p);
    shapes.push_back(p.shape());
  }
  return detail::make_result(
      std::move(out), inputs,
      [shapes, widths, outer, row](const Tensor& g, const std::vector<bool>& needs, std::vector<Tensor>& gin) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < shapes.size(); ++k) {
          if (needs[k]) {
            Tensor gp(shapes[k]);
            for (std::size_t o = 0; o < outer; ++o)
              std::copy_n(g.data.data() + o * row + off, widths[k], gp.data.data() + o * widths[k]);
            gin[k] = std::move(gp);
          }
          off += widths[k];
        }
      });
}

inline Var reshape(const Var& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("numel", "cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  Tensor out(std::move(shape), a.value().data);
  const Shape sa = a.shape();
  return detail::make_result(std::move(out), {&a},
                             [sa](const Tensor& g, const std::vector<bool>&, std::vector<Tensor>& gin) {
                               gin[0] = Tensor(sa, g.data);
                             });
}

namespace detail {

inline Tensor permute_values(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  Shape out_shape(r);
  for (std::size_t d = 0; d < r; ++d) out_shape[d] = x.shape[axes[d]];
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t d = r; d-- > 1;) in_strides[d - 1] = in_strides[d] * x.shape[d];
  Shape strided(r);
  for (std::size_t d = 0; d < r; ++d) strided[d] = in_strides[axes[d]];
  Tensor out(out_shape);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = x[src];
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      src += strided[d];
      if (idx[d] < out_shape[d]) break;
      src -= strided[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  return out;
}

}  // namespace detail

/// Reorders axes: out.shape[d] = in.shape[axes[d]].
inline Var permute(const Var& a, std::vector<std::size_t> axes) {
  const std::size_t r = a.shape().size();
  std::vector<bool> seen(r, false);
  if (axes.size() != r) throw ShapeError("axes", "permute needs " + std::to_string(r) + " axes");
  for (std::size_t ax : axes) {
    if (ax >= r || seen[ax]) throw ShapeError("axes", "permute axes are not a permutation");
    seen[ax] = true;
  }
  std::vector<std::size_t> inverse(r);
  for (std::size_t d = 0; d < r; ++d) inverse[axes[d]] = d;
  return detail::make_result(detail::permute_values(a.value(), axes), {&a},
                             [inverse](const Tensor& g, const std::vector<bool>&, std::vector<Tensor>& gin) {
                               gin[0] = detail::permute_values(g, inverse);
                             });
}

using LinearFn = std::function<Tensor(const Tensor&)>;

/// Applies a fixed linear operator; the backward rule is its adjoint.
inline Var linear_map(const Var& x, LinearFn forward, LinearFn adjoint) {
  Tensor out = forward(x.value());
  return detail::make_result(std::move(out), {&x},
                             [adjoint = std::move(adjoint)](const Tensor& g, const std::vector<bool>&,
                                                            std::vector<Tensor>& gin) { gin[0] = adjoint(g); });
}

}  // namespace cdl::ad
