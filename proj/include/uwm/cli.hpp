#pragma once

#include <string>
#include <vector>

namespace uwm {

// Full command-line entry point, in-process. `args` excludes the program
// name. Returns the process exit code: 0 success, 1 check or metric failure,
// 2 configuration or input error.
int run_cli(const std::vector<std::string>& args);

}  // namespace uwm
