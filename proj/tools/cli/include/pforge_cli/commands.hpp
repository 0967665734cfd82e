#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace pforge::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Parses `args` (without the program name) and runs one subcommand.
/// Normal output goes to `out`, diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Reads PAYLOAD_FORGE_LOG (trace, debug, info, warn, error, off) and
/// configures the stderr logger. Unknown values fall back to warn.
void setup_logging();

}  // namespace pforge::cli
