#pragma once

#include <string>
#include <vector>

namespace ms2d {

inline constexpr const char* kVersion = "0.1.0";

// Entry point behind main(): parses argv (program name excluded), runs the
// subcommand, returns the process exit code. Errors print one line to stderr.
int dispatch(const std::vector<std::string>& args);

}  // namespace ms2d
