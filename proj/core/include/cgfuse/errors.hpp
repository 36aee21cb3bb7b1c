#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cgfuse {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed user data (corpus lines, serialized graphs, checkpoints).
class DataError : public Error {
 public:
  using Error::Error;
};

class InvalidCharacter : public DataError {
 public:
  explicit InvalidCharacter(std::size_t offset)
      : DataError("invalid character at offset " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class SyntaxError : public DataError {
 public:
  SyntaxError(std::size_t offset, std::string expected)
      : DataError("syntax error at offset " + std::to_string(offset) + ", expected " + expected),
        offset_(offset),
        expected_(std::move(expected)) {}
  std::size_t offset() const noexcept { return offset_; }
  const std::string& expected() const noexcept { return expected_; }

 private:
  std::size_t offset_;
  std::string expected_;
};

class FormatError : public DataError {
 public:
  using DataError::DataError;
};

class AlignmentError : public DataError {
 public:
  using DataError::DataError;
};

class IoError : public DataError {
 public:
  using DataError::DataError;
};

/// Input sequence longer than the model's maximum length.
class TooLong : public DataError {
 public:
  using DataError::DataError;
};

class EmptyCorpus : public DataError {
 public:
  using DataError::DataError;
};

class LengthMismatch : public DataError {
 public:
  using DataError::DataError;
};

class MissingGraph : public DataError {
 public:
  explicit MissingGraph(std::size_t example)
      : DataError("missing code graph for example " + std::to_string(example)), example_(example) {}
  std::size_t example() const noexcept { return example_; }

 private:
  std::size_t example_;
};

/// Shape or dimension disagreement between tensors / configs.
class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

class NotScalar : public Error {
 public:
  using Error::Error;
};

/// Bad command-line or config usage; maps to CLI exit code 1.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Broken internal invariant; maps to CLI exit code 3.
class InvariantViolation : public Error {
 public:
  using Error::Error;
};

}  // namespace cgfuse
