#pragma once

#include <stdexcept>
#include <string>

namespace miseg {

// Invalid configuration, shape, precondition, or file contents.
// The CLI maps this class to exit code 2.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

// Filesystem or OS-level failure. The CLI maps this class to exit code 1.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace miseg
