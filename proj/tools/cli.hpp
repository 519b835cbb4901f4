#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mmp::cli {

enum ExitCode : int { kSuccess = 0, kConfigError = 2, kNumericalError = 3, kDataError = 4, kInternalError = 1 };

/// Entry point shared by the executable and the tests.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// FNV-1a 64-bit hash, rendered as 16 hex digits.
std::string fnv1a_hex(const std::string& text);

} // namespace mmp::cli
