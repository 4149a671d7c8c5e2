#pragma once

#include <stdexcept>
#include <string>

namespace cvslt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible array shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Out-of-range token or element index.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Violated precondition (wrong path tag, fully masked attention row, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid run or model configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// File system or serialization failure.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace cvslt
