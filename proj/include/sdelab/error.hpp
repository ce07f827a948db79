#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace sdelab {

// Base class for every recoverable failure raised by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid user-supplied configuration (model spec, solver config, CLI input).
class ConfigError : public Error {
 public:
  using Error::Error;
};

inline std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// Operand shapes do not conform for the named op.
class ShapeError : public Error {
 public:
  ShapeError(const std::string& op, const std::vector<int>& a,
             const std::vector<int>& b)
      : Error("shape mismatch in " + op + ": " + shape_str(a) + " vs " +
              shape_str(b)) {}
  ShapeError(const std::string& op, const std::string& detail)
      : Error("shape error in " + op + ": " + detail) {}
};

// Non-finite state encountered mid-integration or mid-training.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& where, int index)
      : Error(where + ": non-finite state at index " + std::to_string(index)),
        index(index) {}
  int index;
};

}  // namespace sdelab
