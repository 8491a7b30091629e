#pragma once

#include <string>
#include <vector>

namespace linkforge {

// Batch command-line entry point. Commands: preprocess, pretrain, zeroshot,
// adapt, eval, analyze, fusion-study, selftest. Returns the process exit
// code: 0 success, 2 config error, 3 data error, 4 runtime failure.
int run_cli(const std::vector<std::string>& args);

}  // namespace linkforge
