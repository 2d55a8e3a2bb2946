#pragma once

namespace otr::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitPipeline = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitVerifyFailed = 3;

/// Runs one `otr` invocation. Never throws; failures map to the exit codes above.
int run(int argc, const char* const* argv);

}  // namespace otr::cli
