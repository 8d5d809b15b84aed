#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace deformer::cli {

/// Runs the deformer command line. Returns 0 on success, 1 on runtime
/// failure and 2 on usage or configuration errors.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Convenience overload; args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace deformer::cli
