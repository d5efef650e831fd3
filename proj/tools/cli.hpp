#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace olab::cli {

/// Exit codes shared by every subcommand.
enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kDataError = 3,
  kCheckpointError = 4,
  kSchemaError = 5,
};

/// Runs one invocation; args exclude the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace olab::cli
