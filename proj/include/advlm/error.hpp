// SPDX-License-Identifier: Apache-2.0
//
// Exception types shared by every module. The CLI maps these onto exit codes.

#pragma once

#include <stdexcept>
#include <string>

namespace advlm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the real domain of an operation (e.g. log of a non-positive value).
class DomainError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

/// API misuse such as calling backward on a non-scalar.
class ContractError : public Error {
 public:
  using Error::Error;
};

class IngestionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered in a loss or gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

class EvaluationError : public Error {
 public:
  using Error::Error;
};

/// Unreadable or malformed file (checkpoint, vocab, config).
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace advlm
