#pragma once

#include <stdexcept>
#include <string>

namespace towerphys {

// Failure categories. The C API and the CLI map these onto stable codes.
enum class ErrorKind {
  invalid_argument,   // bad config, bad flags, precondition violated
  shape_mismatch,     // tensor shapes incompatible
  numerical,          // non-finite state in physics or tensors
  divergence,         // training loss became non-finite
  format,             // corrupt, truncated, or version-mismatched file
  io,                 // filesystem failure
  quota_unreachable,  // balanced generation could not fill a label quota
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool condition, const std::string& message) {
  if (!condition) fail(ErrorKind::invalid_argument, message);
}

}  // namespace towerphys
