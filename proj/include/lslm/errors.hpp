#pragma once

#include <stdexcept>
#include <string>

namespace lslm {

// Shapes of operands do not agree.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Id or symbol outside its vocabulary.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// API misuse: calling an operation whose precondition does not hold.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// NaN or Inf reached a place where only finite values are allowed.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A sequence does not fit the configured maximum length.
class LengthError : public std::length_error {
 public:
  using std::length_error::length_error;
};

// Inconsistent training/eval data (labels that contradict targets, short streams).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid user input (unsupported characters, unknown words or speakers).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid or inconsistent configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace lslm
