#pragma once

#include <stdexcept>
#include <string>

namespace longseg {

/// Base class for all errors thrown by this library.
class error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent file content (bad header field, truncated payload, ...).
class format_error : public error {
 public:
  using error::error;
};

/// Operation applied in an invalid state (e.g. log-transforming twice).
class state_error : public error {
 public:
  using error::error;
};

/// Invariant violation in a value passed to or produced by an operation.
class validation_error : public error {
 public:
  using error::error;
};

/// Numerical failure: singular system, infeasible deformation, degenerate voxel.
class numeric_error : public error {
 public:
  using error::error;
};

}  // namespace longseg
