#pragma once

#include <stdexcept>
#include <string>

namespace uvl {

/// Shape or extent violation. Messages name the offending shapes.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// NaN/Inf produced or detected ("poisoned" tensor).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Misuse of the autodiff graph (non-scalar loss, consumed graph, ...).
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// The finite-difference oracle itself is unusable (e.g. nondeterministic f).
class OracleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed file, bad magic, truncated stream, checkpoint mismatch.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid user configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

}  // namespace uvl
