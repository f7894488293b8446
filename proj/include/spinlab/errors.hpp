#pragma once

#include <stdexcept>
#include <string>

namespace spinlab {

// Bad configuration or malformed persisted file. Messages name the offending
// field. The CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Input outside the mathematical domain of an operation (invalid token,
// non-normalized distribution, incompatible supports).
class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// API misuse: empty batch, missing cached reference log-probs, and similar.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite value where a finite one is required (NaN loss or gradient).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace spinlab
