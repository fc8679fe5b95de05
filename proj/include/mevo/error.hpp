#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mevo {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint container could not be decoded (header, buffer, dtype, names).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Two vectors or maps do not share the same parameter layout.
class SchemaMismatch : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Missing auxiliary statistics for a merge method (Fisher, Gram, base weights).
class MissingAux : public Error {
 public:
  using Error::Error;
};

/// Raised by external evaluator sessions on malformed or out-of-contract replies.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

class TimeoutError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Scoring failure for one offspring; carries the population slot it belongs to.
class EvaluationError : public Error {
 public:
  EvaluationError(std::size_t candidate, const std::string& what)
      : Error("candidate " + std::to_string(candidate) + ": " + what), candidate_(candidate) {}

  std::size_t candidate() const noexcept { return candidate_; }

 private:
  std::size_t candidate_;
};

}  // namespace mevo
