#pragma once

#include <stdexcept>
#include <string>

namespace amalgam {

// Base of every error the library throws. The CLI maps subclasses onto exit
// codes, so keep the hierarchy flat.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor or feature shapes disagree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// API misuse (e.g. backward on a non-scalar, unknown task name).
class UsageError : public Error {
 public:
  using Error::Error;
};

// Invalid data values: out-of-range labels, empty masks, NaN tables.
class DataError : public Error {
 public:
  using Error::Error;
};

// Structurally incompatible networks or invalid run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or corrupted files.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss during training.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace amalgam
