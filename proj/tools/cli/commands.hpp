#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace mmq::cli
{

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitPartial = 2;

/// Parses argv (argv[0] is the program name) and runs one subcommand:
/// grid, analyze, plot or quantize. Returns the process exit code.
int run(const std::vector<std::string> &args, std::ostream &out, std::ostream &err);

} // namespace mmq::cli
