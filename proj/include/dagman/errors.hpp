#pragma once

#include <stdexcept>
#include <string>

namespace dagman {

// Base of every error raised by the library. The CLI maps each subclass to a
// distinct process exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A value violates a documented invariant. `field()` names the offending
// field using a dotted path (e.g. "encoder.stage_heads[2]").
class ValidationError : public Error {
 public:
  ValidationError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}

  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

// Filesystem failures and malformed on-disk payloads.
class IoError : public Error {
 public:
  using Error::Error;
};

// A checkpoint or volume file that was readable but is not a valid container.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

// Training produced a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ValidationError(field, what);
}

}  // namespace detail
}  // namespace dagman
