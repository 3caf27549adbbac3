#pragma once

#include <stdexcept>
#include <string>

namespace flexest {

// Bad input data: malformed files, dangling references, out-of-range device values.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A numerical procedure failed (divergence, NaN loss, singular system).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace flexest
