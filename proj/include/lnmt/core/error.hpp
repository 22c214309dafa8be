#pragma once

#include <stdexcept>
#include <string>

namespace lnmt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed experiment configuration or method/scenario mismatch.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Input that violates an operation's precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Checkpoint or corpus file problems (missing, corrupted, wrong version).
class IoError : public Error {
 public:
  using Error::Error;
};

/// Training diverged (NaN/Inf in parameters or loss).
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace lnmt
