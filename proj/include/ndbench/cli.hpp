#pragma once

#include <ostream>

namespace ndbench {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitTrainingFailure = 3;

// Subcommands: synth, preprocess, train, finetune, bench, scale, report.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ndbench
