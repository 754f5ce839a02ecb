#pragma once

#include <string>
#include <vector>

namespace unlearnkit {

/// Exit codes of the command-line front end.
namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int failure = 1;
inline constexpr int usage = 2;    // bad flags, missing or malformed inputs
inline constexpr int numeric = 3;  // divergence during a run
}  // namespace exit_code

/// Runs one subcommand. `args` excludes the program name. Errors are printed to stderr as JSON.
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, const char* const* argv);

}  // namespace unlearnkit
