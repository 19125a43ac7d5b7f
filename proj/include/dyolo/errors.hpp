#pragma once

#include <stdexcept>
#include <string>

namespace dyolo {

// Bad shapes, out-of-range scalars, malformed boxes.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Input data that parses but breaks a contract (unknown class, empty dataset).
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operation not allowed in the current mode or phase.
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

template <typename E>
[[noreturn]] inline void raise(const std::string& where, const std::string& what) {
  throw E(where + ": " + what);
}

}  // namespace detail

}  // namespace dyolo
