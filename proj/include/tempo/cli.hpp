#pragma once

#include <exception>
#include <ostream>
#include <string>
#include <vector>

namespace tempo {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitNumeric = 4,
};

// Maps a caught exception to the process exit code.
int exit_code_for(const std::exception& e);

// Runs the command line `args` (args[0] is the program name). Normal output
// goes to `out`, diagnostics to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tempo
