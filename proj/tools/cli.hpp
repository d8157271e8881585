#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace exitsim::cli {

/// Exit statuses of the command-line tool.
enum Status : int { kOk = 0, kRuntime = 1, kUsage = 2 };

/// Runs one command line. Results go to `out`; failures go to `err` as a
/// single-line JSON record, usage problems as usage text.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace exitsim::cli
