#pragma once

#include <stdexcept>
#include <string>

namespace pvl {

// Invalid input or configuration. The CLI maps this to exit code 1.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A well-formed request that failed while running. Exit code 2.
class RuntimeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed or truncated file.
class ParseError : public RuntimeError {
 public:
  using RuntimeError::RuntimeError;
};

// File carries a known magic with an unsupported version.
class VersionError : public ParseError {
 public:
  using ParseError::ParseError;
};

}  // namespace pvl
