#pragma once

namespace pgmfuse::cli {

// Full command-line surface; returns the process exit code:
// 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
int run(int argc, const char* const* argv);

}  // namespace pgmfuse::cli
