#pragma once

#include <stdexcept>
#include <string>

namespace sentwhite {

// Base of all toolkit errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad configuration or arguments: layer out of range, duplicate layers,
// empty grid product and the like. The CLI maps these to exit code 1.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Bad input data: malformed files, non-finite values, degenerate inputs.
// The CLI maps these to exit code 2.
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace sentwhite
