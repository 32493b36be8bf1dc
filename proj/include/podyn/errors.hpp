#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace podyn {

/// Non-finite value or an operation that needs more data than it was given.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what, std::ptrdiff_t index = -1)
      : std::runtime_error(what), index_(index) {}

  /// Offending item index, or -1 when not tied to a single item.
  std::ptrdiff_t index() const noexcept { return index_; }

 private:
  std::ptrdiff_t index_;
};

/// Too few items to form a quantile partition or an IQR threshold.
class PartitionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A caller broke a documented precondition that is not a plain domain error.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ProbeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value; `field()` is the dotted path of the field.
class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Training stopped because the loss became non-finite.
class TrainingAbort : public std::runtime_error {
 public:
  TrainingAbort(long step, const std::string& what)
      : std::runtime_error("step " + std::to_string(step) + ": " + what), step_(step) {}

  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace podyn
