#pragma once

#include <stdexcept>
#include <string>

namespace latentctl {

// Shape or dimension contract violated by the caller.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf produced somewhere in a computation, or a numerical procedure
// that cannot continue (divergence, degenerate envelope, ...).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or inconsistent configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint file unreadable, truncated, or of the wrong version/kind.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace latentctl
