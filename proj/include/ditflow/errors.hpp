#pragma once

#include <stdexcept>
#include <string>

namespace ditflow {

/// Operand extents violate an operation's shape rule.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A NaN or infinity reached a place that requires finite values.
class NonFiniteError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// A configuration or argument failed validation.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed or unreadable on-disk artifact.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ditflow
