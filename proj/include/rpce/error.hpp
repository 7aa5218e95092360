#pragma once

#include <stdexcept>
#include <string>

namespace rpce {

// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Iteration caps hit, breakdown, loss of definiteness.
class NumericalFailure : public Error {
 public:
  using Error::Error;
};

// Residual target below what any coefficient vector can reach.
class Infeasible : public Error {
 public:
  using Error::Error;
};

class CapacityError : public Error {
 public:
  using Error::Error;
};

// Degenerate statistical input (constant outputs, zero spectrum, ...).
class DegenerateInput : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace rpce
