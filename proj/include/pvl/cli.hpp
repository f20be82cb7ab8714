#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace pvl::cli {

// Runs one command line (args[0] is the program name). Returns the exit
// code: 0 ok, 1 validation failure, 2 runtime failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace pvl::cli
