#pragma once

#include <stdexcept>
#include <string>

namespace dermaug {

/// Bad input: malformed manifests, unknown labels, invalid configuration.
/// The CLI maps this to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A pipeline stage failed while running (divergence, I/O during a stage).
/// The CLI maps this to exit code 2.
class StageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dermaug
