#pragma once

#include <stdexcept>
#include <string>

namespace sparc {

// Base of every error thrown by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Operand shapes do not match the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A scalar argument is outside its valid range (k, T, tau, ...).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Input violates a numeric precondition (non-finite entries, asymmetry,
// zero-norm rows, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Data carries no usable signal (zero variance, empty orthogonal residual).
class DegenerateDataError : public Error {
 public:
  using Error::Error;
};

// File and dataset problems: missing fields, malformed lines, bad paths.
class DataError : public Error {
 public:
  using Error::Error;
};

// Serialized store/checkpoint problems, one code per failure mode.
class StoreError : public DataError {
 public:
  enum class Code { bad_magic, version_mismatch, digest_mismatch, truncated };

  StoreError(Code code, const std::string& what) : DataError(what), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

}  // namespace sparc
