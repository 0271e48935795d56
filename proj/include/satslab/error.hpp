#pragma once

#include <stdexcept>
#include <string>

namespace satslab {

/// Base of every error thrown by the library. The CLI maps each subclass to
/// an exit code (see exit_code()).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or shape bookkeeping (exit code 1).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// API misuse: wrong call order, violated precondition (exit code 1).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent data on disk or in memory (exit code 2).
class DataError : public Error {
 public:
  using Error::Error;
};

/// File-system failures (exit code 2).
class IoError : public DataError {
 public:
  using DataError::DataError;
};

/// NaN/Inf during training (exit code 3).
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Broken internal invariant; indicates a bug rather than bad input.
class InternalError : public Error {
 public:
  using Error::Error;
};

inline int exit_code(const std::exception& e) {
  if (dynamic_cast<const NumericalError*>(&e)) return 3;
  if (dynamic_cast<const DataError*>(&e)) return 2;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const UsageError*>(&e)) return 1;
  return 1;
}

}  // namespace satslab
