#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace kvq::cli {

// Runs one `kvq` invocation. args excludes the program name. Returns the
// process exit code; failures print "error: <category>: <message>" to err.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitFailure = 1;

}  // namespace kvq::cli
