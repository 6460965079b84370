#pragma once

#include <stdexcept>
#include <string>

namespace shapprune {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or layer shapes do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An argument is outside its documented domain.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A loss or objective went NaN/inf during optimization.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Reading or writing a file failed.
class IoError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  enum class Cause { BadMagic, BadVersion, BadChecksum, Malformed };

  CheckpointError(Cause cause, const std::string& what) : Error(what), cause_(cause) {}
  Cause cause() const noexcept { return cause_; }

 private:
  Cause cause_;
};

}  // namespace shapprune
