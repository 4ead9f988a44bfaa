#pragma once

#include <stdexcept>
#include <string>

namespace vlfusion {

// Input file absent or unreadable; the CLI maps this to exit code 2.
struct MissingInputError : std::runtime_error {
  explicit MissingInputError(const std::string& what) : std::runtime_error(what) {}
};

// Data violates a documented invariant; the CLI maps this to exit code 3.
struct DataError : std::runtime_error {
  explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace vlfusion
