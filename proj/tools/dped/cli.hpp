#pragma once

#include <iostream>
#include <string>
#include <vector>

namespace dped::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitEmpty = 3;
inline constexpr int kExitDivergence = 4;

/// Runs the dped command line on `args` (without the program name) and
/// returns the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr);

}  // namespace dped::cli
