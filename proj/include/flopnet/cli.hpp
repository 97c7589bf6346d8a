#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace flopnet {

// Runs the command-line interface on the given arguments (without argv[0]).
// Exit codes: 0 = all checks passed, 1 = a check failed, 2 = usage error.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace flopnet
