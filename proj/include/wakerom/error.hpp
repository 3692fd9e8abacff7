/*
 * (C) Copyright 2026 The wakerom Authors
 *
 * This software is licensed under the terms of the Apache Licence Version 2.0
 * which can be obtained at http://www.apache.org/licenses/LICENSE-2.0.
 */

#pragma once

#include <stdexcept>
#include <string>

namespace wakerom {

/// Base class of every error thrown by the library. The C API maps the
/// concrete subclasses onto status codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand dimensions are incompatible.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A non-finite value appeared, or a factorization broke down.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Reading or writing a file failed. The message names the path.
class IoError : public Error {
 public:
  using Error::Error;
};

/// A configuration value failed validation. The message names the field path.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A linear system is too ill-conditioned to solve.
class ConditionError : public NumericError {
 public:
  ConditionError(const std::string& what, double condition)
      : NumericError(what), condition_(condition) {}
  double condition() const { return condition_; }

 private:
  double condition_;
};

}  // namespace wakerom
