// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace dora {

// Shape incompatibility between operands. Messages name both shapes.
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

// A column norm at or below the epsilon guard where a division is required.
class DegenerateColumnError : public std::domain_error {
 public:
  explicit DegenerateColumnError(const std::string& what) : std::domain_error(what) {}
};

// Constant input where a correlation or regression slope is requested.
class DegenerateVarianceError : public std::domain_error {
 public:
  explicit DegenerateVarianceError(const std::string& what) : std::domain_error(what) {}
};

// Invalid configuration or command usage. CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Filesystem or serialization failure. CLI maps this to exit code 3.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// Numeric failure during training or a failed verification check.
// CLI maps this to exit code 1.
class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace dora
