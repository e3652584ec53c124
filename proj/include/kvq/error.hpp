#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace kvq {

// Every failure surfaced by the library carries one of these categories so
// callers (and the CLI's stderr contract) can tell failures apart without
// parsing messages.
enum class ErrorKind {
  kInvalidArgument,
  kShapeMismatch,
  kOutOfRange,
  kBadMagic,
  kVersionMismatch,
  kUnsupportedDtype,
  kTruncated,
  kMalformed,
  kNonFinite,
  kIo,
  kState,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what);

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& what);

inline void require(bool cond, ErrorKind kind, const char* what) {
  if (!cond) fail(kind, what);
}

}  // namespace kvq
