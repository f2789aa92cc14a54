#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ibn::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2 };

/// Entry point shared by the executable and the tests. `args` excludes the
/// program name.
int run(const std::vector<std::string> &args, std::ostream &out, std::ostream &err);

} // namespace ibn::cli
