#pragma once

#include <stdexcept>
#include <string>

namespace locvar {

// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid argument or configuration value (bandwidth, lag, index, theta...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Function evaluated outside [0, 1].
class DomainError : public Error {
 public:
  using Error::Error;
};

// Numerical failure: Cholesky breakdown, empty kernel support, degenerate
// smoother, non-positive scaling curve, degenerate plug-in denominator.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed config file or command-line value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace locvar
