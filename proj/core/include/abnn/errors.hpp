#pragma once

#include <stdexcept>

namespace abnn {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or extents.
struct ShapeError : Error {
  using Error::Error;
};

/// A documented precondition was violated by the caller.
struct ContractError : Error {
  using Error::Error;
};

/// Cholesky pivot failure: matrix not positive definite.
struct PsdError : Error {
  using Error::Error;
};

/// backward() called twice on one tape, or on a detached graph.
struct TapeError : Error {
  using Error::Error;
};

/// An operation produced a non-finite value from finite inputs.
struct NumericError : Error {
  using Error::Error;
};

/// Malformed input data (bad labels, inconsistent task).
struct DataError : Error {
  using Error::Error;
};

/// File-format problems: unrecognised magic number or layout.
struct FormatError : DataError {
  using DataError::DataError;
};

/// Unsupported on-disk format version.
struct VersionError : FormatError {
  using FormatError::FormatError;
};

/// File shorter than its header promises.
struct TruncationError : DataError {
  using DataError::DataError;
};

/// Training aborted (non-finite objective, bad configuration).
struct TrainingError : Error {
  using Error::Error;
};

}  // namespace abnn
