#pragma once

#include <iosfwd>

namespace modality::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumerical = 3;

/// Default output directory when --out is not given.
inline constexpr const char* kOutputDirEnv = "MODALITY_OUTPUT_DIR";

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace modality::cli
