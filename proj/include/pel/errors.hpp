#pragma once

#include <stdexcept>
#include <string>

namespace pel {

// Error taxonomy mirrored by the CLI exit codes: config/schema problems exit
// with 2, data problems with 3, numerical failures with 4.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace pel
