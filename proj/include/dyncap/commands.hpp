#pragma once

// Library-level entry points behind the CLI subcommands. Each writes its
// outputs under a run directory and returns the paths it produced.

#include <string>
#include <vector>

#include "dyncap/config.hpp"

namespace dyncap {

struct CommandResult {
    std::string run_dir;
    std::vector<std::string> outputs;
};

// train/val/test feature+caption files plus the vocabulary, under data_dir.
CommandResult cmd_gen_data(const RunConfig& cfg);

// phase: "ce", "scst", or "both".
CommandResult cmd_train(const RunConfig& cfg, const std::string& phase);

CommandResult cmd_eval(const RunConfig& cfg, const std::string& checkpoint);

CommandResult cmd_route_inspect(const RunConfig& cfg, const std::string& checkpoint,
                                const std::string& split = "test");

CommandResult cmd_diverse_sample(const RunConfig& cfg, const std::string& checkpoint,
                                 std::uint64_t sample_id, int k,
                                 const std::string& split = "test");

// Loads one split ("train"/"val"/"test") written by cmd_gen_data.
Dataset load_split(const RunConfig& cfg, const std::string& split);

}  // namespace dyncap
