#pragma once

#include <stdexcept>
#include <string>

namespace dcst {

/// Invalid configuration (bad hyperparameters, inconsistent scale specs, unknown config keys).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Operand shapes do not fit the operation.
class DimensionError : public std::runtime_error {
 public:
  explicit DimensionError(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed or inconsistent input files.
class IngestionError : public std::runtime_error {
 public:
  explicit IngestionError(const std::string& what) : std::runtime_error(what) {}
};

/// NaN/Inf produced during computation, or a diverging training run.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

class CheckpointError : public std::runtime_error {
 public:
  explicit CheckpointError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace dcst
