#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ecgsl::cli {

// Runs one command line (without the program name) and returns the exit code.
// Failures print a single "error[E_CODE]: message" line to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace ecgsl::cli
