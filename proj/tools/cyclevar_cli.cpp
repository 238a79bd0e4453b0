// Command line for the translator pipeline: tokenizer pretraining, adversarial
// training, translation, gradient checking, ablation sweeps and benchmarks.

#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cyclevar/commands.hpp"

namespace {

using cyclevar::Overrides;
using cyclevar::RunConfig;

// Every flag is stored as text and replayed through the config key=value
// parser, so file config, fresh defaults and checkpoint-resume all merge the
// same way: defaults, then --config file, then explicit flags.
struct OptSet {
    std::string config_file;
    std::map<std::string, std::string> value;  // node-based; references stay valid
    std::vector<std::pair<std::string, CLI::Option*>> opts;
    std::vector<std::pair<std::string, CLI::Option*>> flags;

    void opt(CLI::App* c, const std::string& flag, const std::string& key,
             const std::string& help) {
        opts.emplace_back(key, c->add_option(flag, value[key], help));
    }
    void flag(CLI::App* c, const std::string& flag_name, const std::string& key,
              const std::string& help) {
        flags.emplace_back(key, c->add_flag(flag_name, help));
    }
    void config(CLI::App* c) {
        c->add_option("--config", config_file, "key=value config file applied before flags");
    }

    Overrides overrides() const {
        Overrides out;
        for (const auto& [key, o] : opts)
            if (o->count() > 0) out.push_back(key + "=" + value.at(key));
        for (const auto& [key, o] : flags)
            if (o->count() > 0) out.push_back(key + "=1");
        return out;
    }

    RunConfig build() const {
        RunConfig cfg;
        if (!config_file.empty()) cfg = cyclevar::config_load(config_file);
        for (const auto& kv : overrides()) {
            size_t eq = kv.find('=');
            cyclevar::config_apply(cfg, kv.substr(0, eq), kv.substr(eq + 1));
        }
        return cfg;
    }
};

void add_generation_opts(CLI::App* c, OptSet& o) {
    o.opt(c, "--mode", "mode", "generation mode: serial or parallel");
    o.opt(c, "--tau", "tau", "relaxation temperature (> 0)");
    o.opt(c, "--fusion-a", "fusion_a", "fusion weight between refined and source latents [0,1]");
    o.flag(c, "--gumbel", "gumbel", "add Gumbel noise to the relaxation");
    o.flag(c, "--hard", "hard", "hard argmax lookup (severs classifier-head gradients)");
    o.flag(c, "--drop-ms-output", "drop_ms_output", "ablation: keep only the finest residual");
    o.flag(c, "--drop-ms-context", "drop_ms_context",
           "ablation: finest queries see only their own scale");
}

void add_common_opts(CLI::App* c, OptSet& o) {
    o.config(c);
    o.opt(c, "--seed", "seed", "root seed; every stream derives from it");
    o.opt(c, "--out-dir", "out_dir", "output directory");
}

void add_geometry_opts(CLI::App* c, OptSet& o) {
    o.opt(c, "--image-size", "image_size", "square image extent");
    o.opt(c, "--latent-size", "latent_size", "square latent extent");
    o.opt(c, "--latent-channels", "latent_channels", "latent channel count");
    o.opt(c, "--vae-base", "vae_base", "encoder base channel count");
    o.opt(c, "--vocab", "vocab", "codebook size");
    o.opt(c, "--width", "width", "transformer width");
    o.opt(c, "--heads", "heads", "attention heads");
    o.opt(c, "--blocks", "blocks", "transformer depth");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"next-scale autoregressive image translator"};
    app.require_subcommand(1);

    OptSet pre_o, train_o, trans_o, grad_o, abl_o, bench_o;
    cyclevar::TrainArgs train_args;
    cyclevar::TranslateArgs trans_args;
    cyclevar::AblateArgs abl_args;
    cyclevar::BenchArgs bench_args;

    auto* pre = app.add_subcommand("pretrain-tokenizer",
                                   "train the shared VAE + codebook tokenizer");
    add_common_opts(pre, pre_o);
    add_geometry_opts(pre, pre_o);
    pre_o.opt(pre, "--steps", "pretrain_steps", "optimization steps");
    pre_o.opt(pre, "--batch", "pretrain_batch", "images per step");
    pre_o.opt(pre, "--lr", "pretrain_lr", "learning rate");
    pre_o.opt(pre, "--log-every", "log_every", "console/CSV cadence in steps");

    auto* train = app.add_subcommand("train", "adversarial cycle training on two domains");
    add_common_opts(train, train_o);
    add_generation_opts(train, train_o);
    train->add_option("--tokenizer-ckpt", train_args.tokenizer_ckpt,
                      "pretrained tokenizer checkpoint")
        ->required();
    train_o.opt(train, "--steps", "steps", "training steps");
    train_o.opt(train, "--batch", "batch", "image pairs per step");
    train_o.opt(train, "--lr", "lr", "generator/discriminator learning rate");
    train_o.opt(train, "--warmup", "warmup", "linear warmup steps");
    train_o.opt(train, "--weight-decay", "weight_decay", "AdamW weight decay");
    train_o.opt(train, "--width", "width", "transformer width");
    train_o.opt(train, "--heads", "heads", "attention heads");
    train_o.opt(train, "--blocks", "blocks", "transformer depth");
    train_o.opt(train, "--disc-base", "disc_base", "discriminator base channels");
    train_o.opt(train, "--w-cyc", "w_cyc", "cycle loss weight");
    train_o.opt(train, "--w-gan", "w_gan", "adversarial loss weight");
    train_o.opt(train, "--w-idt", "w_idt", "identity loss weight");
    train_o.opt(train, "--w-p", "w_p", "perceptual term weight inside identity loss");
    train_o.opt(train, "--eval-every", "eval_every", "metric cadence in steps");
    train_o.opt(train, "--eval-n", "eval_n", "images per metric pass");
    train_o.opt(train, "--log-every", "log_every", "console cadence in steps");

    auto* trans = app.add_subcommand("translate", "run one image through a trained translator");
    add_common_opts(trans, trans_o);
    add_generation_opts(trans, trans_o);
    trans->add_option("--ckpt", trans_args.ckpt, "translator checkpoint")->required();
    trans->add_option("--input", trans_args.input, "input image (png or ppm)")->required();
    trans->add_option("--output", trans_args.output, "output image path")->required();
    trans->add_option("--to-domain", trans_args.to_domain, "target domain: x or y");

    auto* grad = app.add_subcommand("gradcheck",
                                    "finite-difference audit of the training gradients");
    add_common_opts(grad, grad_o);
    add_generation_opts(grad, grad_o);

    auto* abl = app.add_subcommand("ablate", "metric sweeps over a trained checkpoint");
    add_common_opts(abl, abl_o);
    add_generation_opts(abl, abl_o);
    abl->add_option("--ckpt", abl_args.ckpt, "translator checkpoint")->required();
    abl->add_option("--sweep", abl_args.sweep, "temperature, mask, mode or gumbel");
    abl_o.opt(abl, "--eval-n", "eval_n", "images per cell");

    auto* bench = app.add_subcommand("bench", "serial vs parallel generation timing");
    add_common_opts(bench, bench_o);
    add_generation_opts(bench, bench_o);
    add_geometry_opts(bench, bench_o);
    bench->add_option("--ckpt", bench_args.ckpt, "optional checkpoint; fresh weights otherwise");
    bench_o.opt(bench, "--repeats", "repeats", "timed repetitions per mode");
    bench_o.opt(bench, "--warmup", "bench_warmup", "untimed warmup repetitions");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? cyclevar::kExitOk : cyclevar::kExitUsage;
    }

    try {
        if (pre->parsed()) return cyclevar::cmd_pretrain_tokenizer(pre_o.build());
        if (train->parsed()) return cyclevar::cmd_train(train_o.build(), train_args);
        if (trans->parsed()) return cyclevar::cmd_translate(trans_o.overrides(), trans_args);
        if (grad->parsed()) return cyclevar::cmd_gradcheck(grad_o.build());
        if (abl->parsed()) return cyclevar::cmd_ablate(abl_o.overrides(), abl_args);
        if (bench->parsed()) return cyclevar::cmd_bench(bench_o.build(), bench_args);
    } catch (const cyclevar::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return cyclevar::kExitUsage;
    }
    return cyclevar::kExitUsage;
}
