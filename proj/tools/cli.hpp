#pragma once

// Command-line entry points. Exit codes: 0 success, 1 usage, 2 data error,
// 3 numerical failure.

#include <iosfwd>

namespace dreg::cli {

enum ExitCode : int { ok = 0, usage = 1, data = 2, numerical = 3 };

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace dreg::cli
