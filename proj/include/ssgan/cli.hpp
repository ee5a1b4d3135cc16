#pragma once

#include <string>
#include <vector>

namespace ssgan {

// Dispatch one CLI invocation; args exclude the program name. Returns the
// process exit code. Errors print a single machine-readable line to stderr.
int cli_dispatch(const std::vector<std::string>& args);

}  // namespace ssgan
