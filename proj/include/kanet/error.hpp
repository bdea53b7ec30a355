#pragma once

#include <stdexcept>
#include <string>

namespace kanet {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible with the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A value is outside the operation's documented domain.
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// A configuration cannot be satisfied by the data it is applied to.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A class appears in a set it must not be part of (duplicate ids on extension).
class ConflictError : public Error {
 public:
  using Error::Error;
};

/// A class was given with no samples or tokens.
class EmptyClassError : public Error {
 public:
  using Error::Error;
};

/// An operation was called in a state that violates its precondition.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// Binary tensor payload is malformed.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Manifest or file ingestion failed.
class IngestionError : public Error {
 public:
  using Error::Error;
};

/// Sessions were fed out of order or violate the session contract.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// Training diverged (non-finite loss).
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace kanet
