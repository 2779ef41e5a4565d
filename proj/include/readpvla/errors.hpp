#pragma once

#include <stdexcept>
#include <string>

namespace readpvla {

// Base for everything this library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape disagreements between tensors or between a tensor and a config.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf inputs, underflow, divergence, division-by-zero guards.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or contract misuse (bad mass, missing modules, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Degenerate or unusable data (zero-norm rows, metrics with no positives).
class DataError : public Error {
 public:
  using Error::Error;
};

// Checkpoint does not fit the model it is being loaded onto.
class CompatibilityError : public Error {
 public:
  using Error::Error;
};

// Filesystem failures, always carrying the offending path.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace readpvla
