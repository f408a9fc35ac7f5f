#pragma once

#include <stdexcept>
#include <string>

namespace cgnet {

/// Inconsistent shapes, divisibility violations, malformed configs.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An operation was called in the wrong lifecycle state (e.g. unfrozen
/// statistics at inference, backward without a matching forward).
class StateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad or truncated input files, degenerate numeric input.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cgnet
