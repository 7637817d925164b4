#pragma once

#include <stdexcept>
#include <string>

namespace matekd {

// Raised for contract violations and malformed inputs.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised for invalid or conflicting configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace matekd
