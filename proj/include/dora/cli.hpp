// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

namespace dora {

// Process exit codes shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 1;  // numeric or verification failure
inline constexpr int kExitUsage = 2;        // bad flags or bad run config
inline constexpr int kExitIo = 3;           // filesystem / serialization trouble

// Full CLI: train / analyze / merge / gradcheck. Parses args, dispatches,
// and maps every thrown error onto the exit codes above (messages go to
// stderr). The vector overload takes the args without the program name.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);

}  // namespace dora
