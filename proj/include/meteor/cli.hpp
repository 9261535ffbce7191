#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace meteor::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitIo = 2;
inline constexpr int kExitConfig = 3;
inline constexpr int kExitDiverged = 4;

/// Runs the command line `args` (args[0] is the program name).
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace meteor::cli
