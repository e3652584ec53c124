#include "kvq/error.hpp"

namespace kvq {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return "invalid_argument";
    case ErrorKind::kShapeMismatch: return "shape_mismatch";
    case ErrorKind::kOutOfRange: return "out_of_range";
    case ErrorKind::kBadMagic: return "bad_magic";
    case ErrorKind::kVersionMismatch: return "version_mismatch";
    case ErrorKind::kUnsupportedDtype: return "unsupported_dtype";
    case ErrorKind::kTruncated: return "truncated";
    case ErrorKind::kMalformed: return "malformed";
    case ErrorKind::kNonFinite: return "non_finite";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kState: return "state";
  }
  return "unknown";
}

Error::Error(ErrorKind kind, const std::string& what)
    : std::runtime_error(what), kind_(kind) {}

void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace kvq
