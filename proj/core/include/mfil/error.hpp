#pragma once

#include <stdexcept>
#include <string>

namespace mfil {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible extents; the message names the offending axes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Non-finite value produced by a forward op, or an invalid numeric domain.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class GradError : public Error {
 public:
  using Error::Error;
};

}  // namespace mfil
