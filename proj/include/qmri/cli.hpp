#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace qmri::cli {

enum ExitCode : int {
  kOk = 0,
  kGateFailed = 1,  // repro finished but an acceptance threshold was missed
  kConfig = 2,
  kIo = 3,
  kNumeric = 4,
  kCompat = 5,
};

/// Runs the `qmri` command line. Machine-readable summaries go to `out`,
/// diagnostics to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace qmri::cli
