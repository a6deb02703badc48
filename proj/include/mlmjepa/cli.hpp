#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mlmjepa::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfig = 2,
  kData = 3,
  kNumerical = 4,
};

/// Environment variable that replaces the default output root.
inline constexpr const char* kOutRootEnv = "MLMJEPA_OUT_ROOT";

/// Runs one command line. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mlmjepa::cli
