#pragma once

#include <stdexcept>
#include <string>

namespace tcaf {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or feature widths.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value (dropout rate, odd d_pos, unknown variant, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf detected by the numeric guard, or an ill-defined numeric request.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// An attention mask leaves a query token with nothing to attend to.
class MaskError : public Error {
 public:
  using Error::Error;
};

/// Broken contract at the data or evaluation layer (empty split, bad label, ...).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failures.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace tcaf
