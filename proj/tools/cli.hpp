#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace objsearch::cli {

enum ExitCode : int { kOk = 0, kIoOrConfig = 1, kQueryError = 2 };

/// Runs the command line with `args` (excluding the program name).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace objsearch::cli
