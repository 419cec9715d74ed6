#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cdl/errors.hpp"

namespace cdl {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Dense row-major array of 64-bit floats. Rank-0 tensors (empty shape) hold one value.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;

  explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(numel(shape), fill) {}

  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
    if (data.size() != numel(shape)) {
      throw ShapeError("data", "buffer of " + std::to_string(data.size()) + " values for shape " +
                                   shape_str(shape));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  bool empty() const noexcept { return data.empty(); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  std::span<double> values() noexcept { return data; }
  std::span<const double> values() const noexcept { return data; }

  double item() const {
    if (data.size() != 1) throw ShapeError("numel", "item() on tensor of shape " + shape_str(shape));
    return data[0];
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline void require_shape(const Tensor& t, const Shape& expected, const std::string& what) {
  if (t.shape != expected) {
    throw ShapeError(what, "expected " + shape_str(expected) + ", got " + shape_str(t.shape));
  }
}

}  // namespace cdl
