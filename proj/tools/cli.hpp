#pragma once

#include <ostream>

namespace tnseg {

/// Exit codes: 0 success, 1 verification or metric failure, 2 usage or I/O error.
enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2 };

/// Runs one `tnseg` command. Normal output goes to `out`, diagnostics to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace tnseg
