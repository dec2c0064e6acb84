#pragma once

#include <stdexcept>
#include <string>

namespace eadlab {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class DomainError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// Misuse of an API contract (non-scalar backward, frozen tape, bad argument).
class ContractError : public Error {
 public:
  using Error::Error;
};

// A non-finite value escaped an operation.
class NumericError : public Error {
 public:
  using Error::Error;
};

class RenderError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace eadlab
