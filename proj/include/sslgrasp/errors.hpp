#pragma once

#include <stdexcept>
#include <string>

namespace sslgrasp {

// Misconfigured experiment or graph (bad shapes at construction, unknown method tag).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Caller violated an operation precondition.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite value produced during numeric evaluation; carries the primitive name.
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& op)
      : std::runtime_error("non-finite value in primitive '" + op + "'"), primitive(op) {}
  std::string primitive;
};

// Scene construction failed (e.g. object placement exhausted its retries).
struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace sslgrasp
