#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace zipmpc {

enum ExitCode : int { kExitOk = 0, kExitConfig = 1, kExitIncomplete = 2 };

/// Entry point of the `zipmpc` command; returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace zipmpc
