#pragma once

#include <stdexcept>
#include <string>

namespace fragnet {

// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shape / bounds violations.
struct ShapeError : Error {
  using Error::Error;
};

// Invalid configuration (bad architecture parameters, bad flags, bad manifests).
struct ConfigError : Error {
  using Error::Error;
};

// File system and serialization failures.
struct IoError : Error {
  using Error::Error;
};

// Non-finite values or other numeric failure states.
struct NumericError : Error {
  using Error::Error;
};

// Process exit codes used by the CLI.
enum ExitCode : int {
  kExitOk = 0,
  kExitValidation = 2,
  kExitRuntime = 3,
  kExitIo = 4,
};

}  // namespace fragnet
