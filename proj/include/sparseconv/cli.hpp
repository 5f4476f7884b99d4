#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace sparseconv {

/// Entry point for the `sparseconv` tool. Subcommands: mkmodel, maskgen,
/// verify, train, bench. Returns 0 on success, 1 on runtime/file failures or
/// a failed verification, 2 on usage errors.
int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Reads SPARSECONV_LOG (error|info|debug) and configures the logger.
void init_logging_from_env();

}  // namespace sparseconv
