#pragma once

#include <stdexcept>
#include <string>

namespace mmi {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or rank mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An operation received an empty input it cannot handle (no elements, no
/// unmasked loss positions, zero features).
class EmptyInputError : public Error {
 public:
  using Error::Error;
};

/// More reference images than the synchronizer has embedding slots for.
class CapacityError : public Error {
 public:
  using Error::Error;
};

/// A primitive produced NaN or Inf, or a checked function evaluated to one.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Sample too large for the packing context or the decoding context.
class LengthError : public Error {
 public:
  using Error::Error;
};

/// Missing image data or unknown tensor / key.
class LookupError : public Error {
 public:
  using Error::Error;
};

/// Diffusion timestep or step count outside the schedule.
class ScheduleError : public Error {
 public:
  using Error::Error;
};

/// Malformed file (checkpoint, image, corpus).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration key or value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// File system failure.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mmi
