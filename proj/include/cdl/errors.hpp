#pragma once

#include <stdexcept>
#include <string>

namespace cdl {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when tensor or image shapes disagree. `axis` names the offending dimension.
class ShapeError : public Error {
 public:
  ShapeError(std::string axis, const std::string& what)
      : Error("shape mismatch on axis '" + axis + "': " + what), axis_(std::move(axis)) {}

  const std::string& axis() const noexcept { return axis_; }

 private:
  std::string axis_;
};

class ValueError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Divergence, NaN/Inf in a loss or objective.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace cdl
