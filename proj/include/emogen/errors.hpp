#pragma once

#include <stdexcept>
#include <string>

namespace emogen {

// Bad input data: malformed records, unknown labels, corrupt or mismatched files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training diverged or another unrecoverable condition during a run.
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace emogen
