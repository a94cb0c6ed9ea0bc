#pragma once

#include <stdexcept>
#include <string>

namespace epinet {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inconsistent tensor or layer shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An index or displacement outside its valid range.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// NaN or Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  ConfigError(const std::string& msg, int line = 0)
      : Error(line > 0 ? "line " + std::to_string(line) + ": " + msg : msg),
        line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

/// Misuse of a stateful object, e.g. backward without a preceding forward.
class StateError : public Error {
 public:
  using Error::Error;
};

}  // namespace epinet
