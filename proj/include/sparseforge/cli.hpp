#ifndef SPARSEFORGE_CLI_HPP_
#define SPARSEFORGE_CLI_HPP_

#include <ostream>

namespace sparseforge::cli {

enum ExitCode : int {
  kSuccess = 0,
  kUsage = 1,
  kDataError = 2,
  kDivergence = 3,
  kVerificationFailure = 4,
};

/// Entry point of the `sparseforge` tool: train, prune, eval, report and
/// gradcheck subcommands.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace sparseforge::cli

#endif  // SPARSEFORGE_CLI_HPP_
