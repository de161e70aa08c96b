#pragma once

#include <stdexcept>
#include <string>

namespace diffx {

/// Base class for every error raised by the library. `exit_code()` is the
/// process status the CLI maps the error to.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Out-of-range argument: schedule bounds, timesteps, box coordinates, p.
class RangeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

class DataError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

class CheckpointError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 4; }
};

class OverlengthError : public Error {
 public:
  using Error::Error;
};

class UnknownLabelError : public Error {
 public:
  using Error::Error;
};

class UnknownModalityError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

/// Scene objects could not be placed without overlap.
class PlacementError : public DataError {
 public:
  using DataError::DataError;
};

}  // namespace diffx
