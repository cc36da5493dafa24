#pragma once

#include <stdexcept>
#include <string>

namespace dequant {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or channel counts do not agree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A value violates a documented domain (out of [0,1], non-positive k, ...).
class RangeError : public Error {
 public:
  using Error::Error;
};

/// Input data is degenerate for the requested operation (constant histogram, ...).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

/// File I/O failed (missing file, unwritable path).
class IoError : public Error {
 public:
  using Error::Error;
};

/// File contents do not conform to the expected format.
class FormatError : public Error {
 public:
  enum class Kind { Malformed, Unsupported, BadMagic, Truncated, ChainViolation };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace dequant
