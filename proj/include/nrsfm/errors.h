#pragma once

#include <stdexcept>
#include <string>

namespace nrsfm {

// Bad input: shapes, ranges, files, flags. The CLI maps these to exit code 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// The numbers went wrong: degenerate geometry, non-finite losses. Exit code 2.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DegenerateError : public NumericalError {
 public:
  DegenerateError() : NumericalError("degenerate configuration") {}
  explicit DegenerateError(const std::string& context)
      : NumericalError("degenerate configuration: " + context) {}
};

}  // namespace nrsfm
