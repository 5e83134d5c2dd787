#pragma once

#include <stdexcept>
#include <string>

namespace ustf {

// Error taxonomy. The CLI maps ConfigError to exit 1, DataError to exit 2 and
// NumericError to exit 3.

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class GraphError : public Error {
 public:
  using Error::Error;
};

}  // namespace ustf
