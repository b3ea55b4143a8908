#pragma once

#include <stdexcept>
#include <string>

namespace paed {

/// Base of every failure raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents that do not fit an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration or command-line usage (CLI exit code 1).
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Malformed or incompatible data: audio, annotations, checkpoints (CLI exit code 2).
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace paed
