#pragma once

#include <stdexcept>
#include <string>

namespace h2dilr {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents do not fit the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf reached a place where it must not be stored.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration, arguments, or missing inputs. The CLI maps these
/// to exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or file-format failure.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace h2dilr
