#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "vitmae/run_config.hpp"

namespace vitmae {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3 };

/// Subcommands on a resolved config. Each writes `config.ini` (the resolved
/// config), `metrics.log`, a table file and a checkpoint into `config.out`,
/// and throws the library errors on failure.
void cmd_pretrain(const RunConfig& config, std::ostream& out);
void cmd_finetune(const RunConfig& config, std::ostream& out);
void cmd_eval(const RunConfig& config, std::ostream& out);
void cmd_reconstruct(const RunConfig& config, std::ostream& out);
void cmd_gradcam(const RunConfig& config, std::ostream& out);
void cmd_synth(const RunConfig& config, std::ostream& out);

/// Full command line (args[0] is the program name). Errors are reported on
/// `err` as one line: `error: kind=<kind> exit=<code> message="<text>"`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace vitmae
