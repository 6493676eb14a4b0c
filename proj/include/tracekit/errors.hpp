#pragma once

#include <stdexcept>
#include <string>

namespace tracekit {

// Input-class failures: bad files, bad manifests, violated preconditions on
// caller-supplied data. The CLI maps these to exit code 2.
class input_error : public std::runtime_error {
 public:
  explicit input_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Internal failures (should not happen on valid input). Exit code 1.
class internal_error : public std::runtime_error {
 public:
  explicit internal_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace tracekit
