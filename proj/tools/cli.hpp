#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace steerkit::cli {

enum ExitCode : int {
    kSuccess = 0,
    kFailure = 1,
    kConfigError = 2,
    kRunnerError = 3,
    kIncomplete = 4,
};

// Runs `steerkit <args...>` (args excludes the program name).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace steerkit::cli
