#pragma once

#include <string>
#include <vector>

namespace bfa {

// Entry point behind the bfa binary. Returns the process exit code:
// 0 on success, 2 on bad arguments (with usage on stderr), 1 on runtime
// failure (with the failing stage named).
int run_cli(const std::vector<std::string>& args);

}  // namespace bfa
