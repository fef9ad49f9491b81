#pragma once

#include <stdexcept>
#include <string>

namespace deepcot {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes or dimensions do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A kernel saw (or would produce) NaN/Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid model configuration or an operation invoked on the wrong profile.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed file content (manifest, blob, token stream).
class FormatError : public Error {
 public:
  using Error::Error;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// File could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace deepcot
