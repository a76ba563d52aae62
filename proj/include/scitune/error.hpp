#pragma once

#include <stdexcept>
#include <string>

namespace scitune {

// Raised for problems with user-supplied input: files, configs, arguments.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a numeric invariant is violated inside a computation
// (shape mismatch, non-finite value).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace scitune
