#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace fx::cli {

/// Runs one fxtrain invocation. `args` excludes the program name. Returns the
/// process exit status; diagnostics go to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace fx::cli
