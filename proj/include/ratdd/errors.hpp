// Copyright (c) 2026 The ratdd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace ratdd {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform for an operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A value is outside the mathematical domain of an operation
/// (log of a nonpositive number, negative label weight, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// A caller broke a precondition of the API.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed file content (checkpoint, IDX, CSV).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// An inner training trajectory blew up.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, long step)
      : Error(what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

/// Invalid run configuration. `path` is the JSON path of the offending key.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& path, const std::string& what)
      : Error(path + ": " + what), path_(path) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

/// File system failure (missing file, unwritable directory).
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace ratdd
