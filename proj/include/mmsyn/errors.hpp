#pragma once

#include <stdexcept>
#include <string>

namespace mmsyn {

// Shape/dimension mismatch between operands (e.g. conv input vs weight).
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Invalid configuration value (bad schedule range, even kernel size, ...).
class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Caller violated an API contract (timestep out of range, empty mask, ...).
class ContractError : public std::logic_error {
 public:
  explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Task-level rejection: the requested synthesis task is degenerate
// (all modalities available, or none).
class TaskError : public std::invalid_argument {
 public:
  explicit TaskError(const std::string& msg) : std::invalid_argument(msg) {}
};

// File IO / format failures (bad magic, truncation, CRC mismatch, ...).
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numeric failure at run time (non-finite loss, singular statistics, ...).
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mmsyn
