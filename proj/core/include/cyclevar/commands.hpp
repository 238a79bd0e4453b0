#pragma once

#include <string>
#include <vector>

#include "cyclevar/config.hpp"

namespace cyclevar {

// Shared process exit contract: 0 success, 1 bad input or configuration,
// 2 numerical failure mid-run.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitNumeric = 2;

struct TrainArgs {
    std::string tokenizer_ckpt;
};

struct TranslateArgs {
    std::string ckpt;
    std::string input;
    std::string output;
    std::string to_domain = "y";
};

struct AblateArgs {
    std::string ckpt;
    std::string sweep = "temperature";
};

struct BenchArgs {
    std::string ckpt;  // optional; fresh weights when empty (timing only)
};

// key=value pairs the user passed explicitly on the command line; commands
// that resume from a checkpoint apply them on top of the stored config.
using Overrides = std::vector<std::string>;

int cmd_pretrain_tokenizer(const RunConfig& cfg);
int cmd_train(const RunConfig& cfg, const TrainArgs& args);
int cmd_translate(const Overrides& overrides, const TranslateArgs& args);
int cmd_gradcheck(const RunConfig& cfg);
int cmd_ablate(const Overrides& overrides, const AblateArgs& args);
int cmd_bench(const RunConfig& cfg, const BenchArgs& args);

}  // namespace cyclevar
