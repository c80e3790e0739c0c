#pragma once

#include <stdexcept>
#include <cstdint>
#include <string>
#include <vector>

namespace skinmamba {

// Root of every error thrown by the library. Each subclass maps to one
// failure family so callers (the CLI in particular) can pick an exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A caller broke a documented precondition (e.g. non-positive step size).
class ContractError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced or consumed by a numeric kernel.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration value or combination.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Tensor rank/shape does not fit the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

class EmptyInputError : public Error {
 public:
  using Error::Error;
};

// Images and masks could not be paired one-to-one.
class PairingError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Renders a tensor shape as "(a, b, c)" for error messages.
std::string shape_string(const std::vector<int64_t>& sizes);

}  // namespace skinmamba
