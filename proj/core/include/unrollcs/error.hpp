#pragma once

#include <stdexcept>
#include <string>

namespace unrollcs {

// Base class for every error raised by the library. The CLI maps the
// subclasses onto stable exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor extents or layouts that do not fit together.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameters, flags or config-file keys.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// API misuse, e.g. backward() on a non-scalar.
class ContractError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Dataset problems: empty directory, images smaller than the crop size.
class DataError : public Error {
 public:
  using Error::Error;
};

}  // namespace unrollcs
