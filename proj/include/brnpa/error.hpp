#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace brnpa {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand extents are incompatible.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A precondition on a value or configuration does not hold.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failure (open, read, write).
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents. Carries the byte offset where parsing stopped.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

/// An experiment finished but one of its ordering assertions did not hold.
class AssertionFailure : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite value.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

std::string shape_to_string(const std::vector<std::size_t>& shape);

}  // namespace brnpa
