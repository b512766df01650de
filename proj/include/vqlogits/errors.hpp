#pragma once

#include <stdexcept>
#include <string>

namespace vqlogits {

// Error taxonomy shared by every module. The CLI maps these onto exit codes:
// ConfigError/InputError/IndexError/DimensionError -> 2, NumericError -> 3.

struct DimensionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace vqlogits
