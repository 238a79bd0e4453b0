#pragma once

#include <string>
#include <vector>

#include "cyclevar/common.hpp"

namespace cyclevar {

// Every tunable across the pipeline, flat so a key=value file or a flag can
// reach each one. Defaults are the shipping desk-scale configuration.
struct RunConfig {
    // geometry
    int image_size = 32;
    int latent_size = 8;
    int latent_channels = 16;
    int vae_base = 32;

    // quantizer
    int vocab = 64;
    double tau = 2.0;
    bool gumbel = false;
    bool hard = false;
    bool bitwise = false;
    int bitwise_d = 16;

    // transformer
    int width = 64;
    int heads = 4;
    int blocks = 4;
    int mlp_ratio = 4;

    // generation
    std::string mode = "parallel";
    double fusion_a = 0.5;
    bool drop_ms_output = false;
    bool drop_ms_context = false;

    // loss weights
    double w_cyc = 1.0;
    double w_gan = 0.5;
    double w_idt = 1.0;
    double w_p = 0.1;

    // optimization
    double lr = 1e-4;
    int warmup = 200;
    double weight_decay = 0.01;
    int steps = 2000;
    int batch = 8;

    // tokenizer pretraining
    int pretrain_steps = 900;
    int pretrain_batch = 16;
    double pretrain_lr = 2e-3;

    // discriminator / eval
    int disc_base = 16;
    int eval_every = 500;
    int eval_n = 16;
    int log_every = 50;

    // bench
    int repeats = 10;
    int bench_warmup = 3;

    uint64_t seed = 1234;
    std::string out_dir = "out";
};

// Parses "key=value"; throws Error naming the key on unknown names or
// malformed values.
void config_apply(RunConfig& cfg, const std::string& key, const std::string& value);

// Flat key=value file, '#' comments, blank lines ignored.
RunConfig config_load(const std::string& path, RunConfig base = {});

// Range checks with actionable messages; throws Error before any compute.
void config_validate(const RunConfig& cfg);

// All keys in declaration order with current values, one "key=value" each.
std::vector<std::string> config_dump(const RunConfig& cfg);

}  // namespace cyclevar
