#pragma once

#include <stdexcept>
#include <string>

namespace realign {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A NaN or Inf was produced.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A caller-side precondition was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// A direction (or cosine operand) has zero norm.
class DegenerateDirectionError : public Error {
 public:
  using Error::Error;
};

/// Malformed checkpoint, corpus file or config.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Two models (or a model and a file) disagree on configuration.
class ConfigMismatchError : public Error {
 public:
  using Error::Error;
};

}  // namespace realign
