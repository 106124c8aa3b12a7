#pragma once

#include <stdexcept>
#include <string>

namespace attnalign {

// Error taxonomy shared by the whole library. The CLI maps NumericError to
// exit code 2 and everything else to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes (e.g. matmul inner dims).
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Value outside the mathematical domain of an op (log of nonpositive, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// A stated precondition or invariant was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Index out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

// Malformed instance data.
class DataError : public Error {
 public:
  using Error::Error;
};

// Unreadable file contents; carries a line number where applicable.
class ParseError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite value produced by a numeric computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace attnalign
