#pragma once

#include <stdexcept>
#include <string>

namespace mkis {

// Base of everything this library throws on purpose.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Dimension mismatch between operands; message names the offending axes.
struct ShapeError : Error {
  using Error::Error;
};

// Valid tensors, impossible geometry (zero-sized output, indivisible
// spatial extent, degenerate statistic sets).
struct GeometryError : Error {
  using Error::Error;
};

// Bad parameter or configuration value.
struct ConfigError : Error {
  using Error::Error;
};

// Manifest, decoding, or label-content problems.
struct DataError : Error {
  using Error::Error;
};

// NaN/Inf detected, or a numerically aborted training step.
struct NumericError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct FormatVersionError : IoError {
  using IoError::IoError;
};

struct ChecksumError : IoError {
  using IoError::IoError;
};

struct TruncatedFileError : IoError {
  using IoError::IoError;
};

}  // namespace mkis
