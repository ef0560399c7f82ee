#pragma once

#include <stdexcept>
#include <string>

namespace bgadapt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A value lies outside the domain of an operation (e.g. log of a non-positive number).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration, flag or argument.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A documented calling contract was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// File could not be read or written, or its contents are corrupt.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Training diverged (non-finite loss).
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace bgadapt
