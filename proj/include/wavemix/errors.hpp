#pragma once

#include <stdexcept>
#include <string>

namespace wavemix {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes (or channel counts) are incompatible with an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the autodiff graph: non-scalar loss, detached or consumed graph.
class GraphError : public Error {
 public:
  using Error::Error;
};

/// Malformed model-spec string or an invalid architecture configuration.
class SpecError : public Error {
 public:
  using Error::Error;
};

/// Invalid value passed to an operation (target out of range, bad factor...).
class ValueError : public Error {
 public:
  using Error::Error;
};

/// Problems reading or writing on-disk formats (IDX, CIFAR, checkpoints, configs).
class FormatError : public Error {
 public:
  enum class Kind { kBadMagic, kTruncated, kCountMismatch, kBadSize, kBadLabel, kBadHeader, kMismatch, kIo };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace wavemix
