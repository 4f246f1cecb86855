// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace kdqat {

// Shape or extent mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Non-finite values where finite ones are required.
class NumericError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// A caller broke an operation's precondition (e.g. backward on a non-scalar).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Malformed user input such as out-of-range token ids or empty tensors.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid configuration values or combinations.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Training diverged; carries the step at which the loss stopped being finite.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, long step) : std::runtime_error(what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace kdqat
