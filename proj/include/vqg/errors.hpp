#pragma once

#include <stdexcept>
#include <string>

namespace vqg {

/// Bad input data or configuration: malformed files, out-of-range labels,
/// unknown config keys. The CLI maps it to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace vqg
