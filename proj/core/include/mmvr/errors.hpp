#pragma once

#include <stdexcept>
#include <string>

namespace mmvr {

// Error categories map onto CLI exit codes: ConfigError -> 2,
// MissingInputError -> 3, everything else -> 1.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct ShapeError : Error {
  using Error::Error;
};

// Store-level failures: bad magic, version mismatch, truncation, checksum.
struct DataError : Error {
  using Error::Error;
};

struct MissingInputError : Error {
  using Error::Error;
};

// Non-finite loss or gradient during optimization.
struct TrainError : Error {
  using Error::Error;
};

}  // namespace mmvr
