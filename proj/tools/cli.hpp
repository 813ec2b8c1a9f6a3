#ifndef KRRST_TOOLS_CLI_HPP_
#define KRRST_TOOLS_CLI_HPP_

#include <string>
#include <vector>

#include "json.hpp"

namespace krrst::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitFormat = 3;
inline constexpr int kExitNumeric = 4;

const std::vector<std::string>& command_names();

// Every key a command accepts, with its default. Flags are the flattened
// key paths (e.g. --distill.meta_iterations).
nlohmann::json default_config(const std::string& command);

// Full entry point: argv[1] is the command. Returns the process exit code.
int run(int argc, const char* const* argv);
int run(const std::vector<std::string>& args);

}  // namespace krrst::cli

#endif  // KRRST_TOOLS_CLI_HPP_
