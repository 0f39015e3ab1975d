#pragma once

#include <stdexcept>
#include <string>

namespace cuecan {

// Base of every error the library throws. The CLI maps each subclass onto
// a distinct process exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// A NaN or Inf showed up in a forward or backward pass.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed or missing files, bad metadata, empty splits.
class DataError : public Error {
 public:
  using Error::Error;
};

class InvariantError : public Error {
 public:
  using Error::Error;
};

// Bad arguments to a library entry point (config strings, ratios, ...).
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace cuecan
