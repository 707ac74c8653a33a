#pragma once

#include <stdexcept>
#include <string>

namespace sgz {

// Base class for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/graph dimension inconsistencies.
struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Invalid hyperparameters or run configuration.
struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Malformed manifest / label text.
struct ParseError : Error {
  explicit ParseError(const std::string& msg) : Error(msg) {}
};

// File system and codec failures.
struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};

// Checkpoint/architecture fingerprint mismatches.
struct CompatError : Error {
  explicit CompatError(const std::string& msg) : Error(msg) {}
};

// Class index outside the label set.
struct LabelError : Error {
  explicit LabelError(const std::string& msg) : Error(msg) {}
};

// Missing or mismatched forward cache, wrong mode.
struct StateError : Error {
  explicit StateError(const std::string& msg) : Error(msg) {}
};

// Non-finite loss during training.
struct DivergenceError : Error {
  explicit DivergenceError(const std::string& msg) : Error(msg) {}
};

// Bad arguments to evaluation routines.
struct InputError : Error {
  explicit InputError(const std::string& msg) : Error(msg) {}
};

}  // namespace sgz
