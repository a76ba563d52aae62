#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace scitune {

// Runs one subcommand. Returns 0 on success, 1 on a user error (bad
// arguments, config or input files), 2 on an internal failure.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int dispatch(int argc, char** argv);

}  // namespace scitune
