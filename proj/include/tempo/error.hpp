#pragma once

#include <stdexcept>
#include <string>

namespace tempo {

// Base of every library error. The subclass names the category.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration values: non-positive temperature, bad model shape, ...
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or out-of-range input data: token ids, corpus files, checkpoints.
class DataError : public Error {
 public:
  using Error::Error;
};

// Shape mismatch between tensor operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Violated call contract (non-scalar loss, misaligned lists, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Non-finite values encountered where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace tempo
