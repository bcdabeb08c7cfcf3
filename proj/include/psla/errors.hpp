#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace psla {

// Base of every error the library raises. kind() is a stable lowercase tag
// used by the CLI for its "error: <kind>: <message>" line.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message) : Error("config", message) {}
};

class UnsupportedError : public Error {
 public:
  explicit UnsupportedError(const std::string& message) : Error("unsupported", message) {}
};

class InvalidInputError : public Error {
 public:
  explicit InvalidInputError(const std::string& message) : Error("invalid-input", message) {}
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& message) : Error("usage", message) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& message) : Error("io", message) {}
};

class TrainingError : public Error {
 public:
  TrainingError(std::size_t step, const std::string& message)
      : Error("training", "step " + std::to_string(step) + ": " + message), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace psla
