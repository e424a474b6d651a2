#pragma once

#include <stdexcept>
#include <string>

namespace bamboo {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes that cannot be combined.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf observed at an op boundary.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

// A configuration violates its stated invariants.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Inputs that are well-formed but outside an operation's domain
// (empty mask, too few positions, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

}  // namespace bamboo
