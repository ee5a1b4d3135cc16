#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ssgan {

enum class ErrorCode {
  invalid_argument,
  shape_mismatch,
  non_finite,
  bad_magic,
  truncated_payload,
  dimension_mismatch,
  io_error,
  config_error,
  usage_error,
};

// All recoverable failures are reported through this type so callers (and
// tests) can branch on the code instead of parsing message strings.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg)
      : std::runtime_error(msg), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& msg) {
  throw Error(code, msg);
}

inline void require(bool cond, ErrorCode code, const std::string& msg) {
  if (!cond) fail(code, msg);
}

}  // namespace ssgan
