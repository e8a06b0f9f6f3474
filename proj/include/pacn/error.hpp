#pragma once

#include <stdexcept>
#include <string>

namespace pacn {

/// Inconsistent model/layer configuration or tensor shapes.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller violated an operation's preconditions.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input file could not be read or decoded.
class IngestionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace pacn
