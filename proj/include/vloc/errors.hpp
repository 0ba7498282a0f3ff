#pragma once

#include <stdexcept>
#include <string>

namespace vloc {

// Base class for all library errors.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape / contract violations (mismatched operands, non-scalar
// backward roots, indivisible image extents, ...).
class ShapeError : public Error {
public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Geometry that cannot be solved: collinear point sets, equal singular
// values in the alignment covariance, too few surviving matches.
class DegenerateError : public Error {
public:
  explicit DegenerateError(const std::string& msg) : Error(msg) {}
};

// RANSAC found no hypothesis with enough support.
class LocalizationFailure : public Error {
public:
  explicit LocalizationFailure(const std::string& msg) : Error(msg) {}
};

// File-system and serialization failures; carries the offending path.
class IoError : public Error {
public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

// A numeric check failed (non-finite values, gradient check blow-ups).
class NumericError : public Error {
public:
  explicit NumericError(const std::string& msg) : Error(msg) {}
};

} // namespace vloc
