#pragma once

#include <stdexcept>
#include <string>

namespace fedsim {

// Invalid configuration (bad dimensions, unknown keys, inconsistent specs).
// The CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse: stale tape, out-of-range index, empty input where one is required.
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or truncated input files.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Inconsistent state between federation participants (shape mismatch across packets).
struct ProtocolError : std::runtime_error {
  explicit ProtocolError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace fedsim
