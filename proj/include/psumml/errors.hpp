#pragma once

#include <stdexcept>
#include <string>

namespace psumml {

// Error categories map 1:1 onto CLI exit codes (config 2, io 3, training 4,
// eval 5). Contract violations inside the library throw std::invalid_argument.

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EvalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dataset loading failures are distinct so callers can tell them apart.
struct DatasetVersionError : IoError {
  using IoError::IoError;
};
struct DatasetChecksumError : IoError {
  using IoError::IoError;
};
struct DatasetMissingFileError : IoError {
  using IoError::IoError;
};

}  // namespace psumml
