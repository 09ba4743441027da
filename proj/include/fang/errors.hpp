#pragma once

#include <stdexcept>
#include <string>

namespace fang {

// Root of every error thrown by the library. Subclasses map onto CLI exit
// codes (see tools/fang.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

// Factorization failed even after damping.
class SingularityError : public Error {
 public:
  using Error::Error;
};

// Non-finite or out-of-domain intermediate (e.g. non-positive H^-1 diagonal).
class NumericalError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ParameterError : public Error {
 public:
  using Error::Error;
};

}  // namespace fang
