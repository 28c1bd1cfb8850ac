#pragma once

#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace satcap {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible extents between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
  DimensionError(const std::string& op, const Shape& a, const Shape& b)
      : Error(op + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b)) {}
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class UnsupportedConfigError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// API misuse: non-scalar loss, stale tape, over-long sequences.
class ContractError : public Error {
 public:
  using Error::Error;
};

class EmptyInputError : public Error {
 public:
  using Error::Error;
};

class LoadError : public Error {
 public:
  using Error::Error;
};

class MagicError : public LoadError {
 public:
  using LoadError::LoadError;
};

class TruncationError : public LoadError {
 public:
  using LoadError::LoadError;
};

class ShapeConflictError : public LoadError {
 public:
  using LoadError::LoadError;
};

}  // namespace satcap
