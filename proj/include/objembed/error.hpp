#pragma once

#include <stdexcept>
#include <string>

namespace objembed {

// Each error family maps to one CLI exit code (see tools/objembed.cpp).
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct DivergenceError : Error {
  using Error::Error;
};

struct FormatError : Error {
  using Error::Error;
};

struct IoError : FormatError {
  using FormatError::FormatError;
};

}  // namespace objembed
