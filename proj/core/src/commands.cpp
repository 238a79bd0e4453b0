#include "cyclevar/commands.hpp"

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cyclevar/eval.hpp"
#include "cyclevar/gradcheck.hpp"
#include "cyclevar/image_io.hpp"
#include "cyclevar/pipeline.hpp"
#include "cyclevar/synth.hpp"

namespace cyclevar {

namespace {

namespace fs = std::filesystem;

// CLI training runs in float32; gradcheck forces float64 below.
using F = float;

void ensure_out_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error("cannot create out dir '" + dir + "': " + ec.message());
}

std::string img_name(const std::string& out_dir, const std::string& stem) {
    return out_dir + "/" + stem + (png_supported() ? ".png" : ".ppm");
}

std::ofstream open_csv(const std::string& path, const std::string& header) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    out << header << "\n";
    return out;
}

Domain parse_domain(const std::string& s) {
    if (s == "x") return Domain::x;
    if (s == "y") return Domain::y;
    throw Error("domain must be 'x' or 'y', got '" + s + "'");
}

RunConfig config_with_overrides(const CheckpointData& ck, const Overrides& overrides) {
    RunConfig cfg = checkpoint_config(ck);
    for (const auto& kv : overrides) {
        size_t eq = kv.find('=');
        if (eq == std::string::npos) throw Error("override needs key=value, got '" + kv + "'");
        config_apply(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    config_validate(cfg);
    return cfg;
}

// Fixed measurement stack shared by train-time eval and the ablation sweeps:
// frozen feature proxy plus a domain classifier fitted on real data once.
struct EvalKit {
    std::vector<Tensor<F>> src_x, real_y;
    PerceptualProxy<F> proxy;
    DomainClassifier<F> clf;
    double clf_holdout = 0;
};

EvalKit make_eval_kit(const SyntheticDomainSpec& spec, int n) {
    EvalKit kit;
    kit.proxy = PerceptualProxy<F>::make(77);
    // held-out index ranges, disjoint from the training stream
    const uint64_t off = uint64_t(1) << 41;
    for (int i = 0; i < n; ++i) {
        kit.src_x.push_back(synth_image<F>(spec, Domain::x, int64_t(off) + i).image);
        kit.real_y.push_back(synth_image<F>(spec, Domain::y, int64_t(off) + n + i).image);
    }
    auto rep = train_domain_classifier<F>(spec);
    kit.clf = rep.clf;
    kit.clf_holdout = rep.holdout_acc;
    return kit;
}

struct TranslationEval {
    MetricReport metrics;
    double wall_ms_per_image = 0;
    int forwards_per_image = 0;
};

TranslationEval eval_translation(const Generator<F>& gen, const GenerationConfig& gc,
                                 const EvalKit& kit, Rng* rng) {
    NoGradGuard ng;
    TranslationEval out;
    std::vector<Tensor<F>> fakes;
    double wall = 0;
    double sd = 0;
    for (const auto& img : kit.src_x) {
        GenerationState<F> st;
        auto fake = translate(gen, img, Domain::y, gc, rng, &st);
        wall += st.wall_ms;
        out.forwards_per_image = st.forward_calls;
        sd += struct_dist(kit.proxy, img, fake);
        fakes.push_back(std::move(fake));
    }
    out.metrics.fid_proxy = fid_proxy(kit.proxy, kit.real_y, fakes);
    out.metrics.struct_dist = sd / double(fakes.size());
    out.metrics.domain_acc = domain_acc(kit.clf, fakes, Domain::y);
    out.metrics.n_images = int(fakes.size());
    out.wall_ms_per_image = wall / double(fakes.size());
    return out;
}

void save_image_tensor(const std::string& path, const Tensor<F>& img) {
    save_image(path, image_from_tensor(img));
}

}  // namespace

int cmd_pretrain_tokenizer(const RunConfig& cfg) {
    try {
        config_validate(cfg);
        ensure_out_dir(cfg.out_dir);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    }

    try {
        Rng rng(cfg.seed, "init");
        auto vae = Vae<F>::make(cfg.image_size, cfg.latent_size, cfg.latent_channels,
                                cfg.vae_base, rng);
        auto cb = Codebook<F>::random(cfg.vocab, cfg.latent_channels, rng);
        auto sched = ScaleSchedule::pow2_square(cfg.latent_size);

        SyntheticDomainSpec spec{cfg.seed, cfg.image_size};
        // Both domains feed the shared tokenizer: even draws X, odd draws Y.
        auto sample = [&spec](int64_t i) {
            const Domain d = (i % 2 == 0) ? Domain::x : Domain::y;
            return synth_image<F>(spec, d, i / 2).image;
        };

        PretrainConfig pc;
        pc.steps = cfg.pretrain_steps;
        pc.batch = cfg.pretrain_batch;
        pc.lr = cfg.pretrain_lr;
        pc.warmup = std::min(50, cfg.pretrain_steps);
        pc.log_every = cfg.log_every;
        pc.seed = cfg.seed;

        auto csv = open_csv(cfg.out_dir + "/tokenizer_metrics.csv", "step,loss");
        auto report = pretrain_tokenizer<F>(vae, cb, sched, sample, pc, [&](int step, double loss) {
            csv << step << "," << loss << "\n";
            if (cfg.log_every > 0 && step % cfg.log_every == 0)
                std::printf("pretrain step %d loss %.4f\n", step, loss);
        });

        const std::string ckpt_path = cfg.out_dir + "/tokenizer.ckpt";
        if (!report.ok) {
            checkpoint_save(ckpt_path + ".failed", tokenizer_checkpoint(vae, cb, cfg));
            std::fprintf(stderr, "error: %s\n", report.error.c_str());
            std::fprintf(stderr, "state at abort saved to %s.failed\n", ckpt_path.c_str());
            return kExitNumeric;
        }

        // held-out round trip quality, indices far from the training stream
        double held = 0;
        {
            NoGradGuard ng;
            const int n = 8;
            for (int i = 0; i < n; ++i) {
                const Domain d = (i % 2 == 0) ? Domain::x : Domain::y;
                auto img = synth_image<F>(spec, d, (int64_t(1) << 41) + i).image;
                auto pyr = tokenize_multiscale(vae.encode(img), cb, sched);
                held += l1_loss(reconstruct_image(vae, pyr, sched), img).val()[0];
            }
            held /= n;
        }

        checkpoint_save(ckpt_path, tokenizer_checkpoint(vae, cb, cfg));
        std::printf("pretrained tokenizer: %d steps, final loss %.4f, held-out recon L1 %.4f\n",
                    report.steps_run, report.final_loss, held);
        std::printf("saved %s\n", ckpt_path.c_str());
        return kExitOk;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumeric;
    }
}

int cmd_train(const RunConfig& cli_cfg, const TrainArgs& args) {
    RunConfig cfg = cli_cfg;
    CheckpointData tok_ck;
    try {
        if (args.tokenizer_ckpt.empty()) throw Error("train needs --tokenizer-ckpt");
        tok_ck = checkpoint_load(args.tokenizer_ckpt);
        // Geometry is owned by the tokenizer checkpoint; everything else
        // stays under command-line control.
        RunConfig tc = checkpoint_config(tok_ck);
        cfg.image_size = tc.image_size;
        cfg.latent_size = tc.latent_size;
        cfg.latent_channels = tc.latent_channels;
        cfg.vae_base = tc.vae_base;
        cfg.vocab = tc.vocab;
        cfg.bitwise = tc.bitwise;
        cfg.bitwise_d = tc.bitwise_d;
        config_validate(cfg);
        ensure_out_dir(cfg.out_dir);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    }

    try {
        auto bundle = make_bundle<F>(cfg);
        restore_tokenizer(bundle.gen.vae, bundle.gen.cb, tok_ck, /*allow_extra=*/false);
        auto state = make_train_state(bundle, OptSettings{cfg.lr, cfg.warmup, cfg.weight_decay});

        SyntheticDomainSpec spec{cfg.seed, cfg.image_size};
        Rng gumbel_rng(cfg.seed, "gumbel");
        Rng* noise = cfg.gumbel ? &gumbel_rng : nullptr;

        // fixed input examples for the translate command and for eyeballs
        auto sample_x = synth_image<F>(spec, Domain::x, int64_t(1) << 42).image;
        auto sample_y = synth_image<F>(spec, Domain::y, (int64_t(1) << 42) + 1).image;
        save_image_tensor(img_name(cfg.out_dir, "sample_x"), sample_x);
        save_image_tensor(img_name(cfg.out_dir, "sample_y"), sample_y);

        auto train_csv = open_csv(cfg.out_dir + "/train_metrics.csv",
                                  "step,cycle,gan_g,dis,idt,grad_norm,wall_ms");
        auto eval_csv = open_csv(cfg.out_dir + "/eval_metrics.csv",
                                 "step,fid_proxy,struct_dist,domain_acc");

        EvalKit kit;
        bool kit_ready = false;
        auto run_eval = [&](int step) {
            if (!kit_ready) {
                kit = make_eval_kit(spec, cfg.eval_n);
                std::printf("domain classifier holdout accuracy %.3f\n", kit.clf_holdout);
                kit_ready = true;
            }
            auto ev = eval_translation(bundle.gen, bundle.gen_cfg, kit, noise);
            eval_csv << step << "," << ev.metrics.fid_proxy << "," << ev.metrics.struct_dist
                     << "," << ev.metrics.domain_acc << "\n";
            eval_csv.flush();
            std::printf("eval step %d: fid_proxy %.4f struct_dist %.4f domain_acc %.3f\n", step,
                        ev.metrics.fid_proxy, ev.metrics.struct_dist, ev.metrics.domain_acc);
        };

        const std::string ckpt_path = cfg.out_dir + "/translator.ckpt";
        for (int s = 0; s < cfg.steps; ++s) {
            auto batch = synth_batch<F>(spec, cfg.batch, uint64_t(s) * uint64_t(cfg.batch));
            LossReport lr;
            try {
                lr = train_step(bundle, batch, state, noise);
            } catch (const Error& e) {
                checkpoint_save(ckpt_path + ".failed", bundle_checkpoint(bundle, cfg));
                std::fprintf(stderr, "error: %s\n", e.what());
                std::fprintf(stderr, "state at abort saved to %s.failed\n", ckpt_path.c_str());
                return kExitNumeric;
            }
            train_csv << lr.step << "," << lr.cycle << "," << lr.gan_g << "," << lr.dis << ","
                      << lr.idt << "," << lr.grad_norm << "," << lr.wall_ms << "\n";
            if (cfg.log_every > 0 && (s + 1) % cfg.log_every == 0) {
                std::printf("step %d/%d cycle %.4f gan %.4f dis %.4f idt %.4f (%.0f ms)\n", s + 1,
                            cfg.steps, lr.cycle, lr.gan_g, lr.dis, lr.idt, lr.wall_ms);
                std::fflush(stdout);
            }
            if ((s + 1) % cfg.eval_every == 0 && s + 1 < cfg.steps) run_eval(s + 1);
        }
        if (cfg.steps > 0) run_eval(cfg.steps);

        {
            NoGradGuard ng;
            save_image_tensor(img_name(cfg.out_dir, "sample_x_to_y"),
                              translate(bundle.gen, sample_x, Domain::y, bundle.gen_cfg, noise));
            save_image_tensor(img_name(cfg.out_dir, "sample_y_to_x"),
                              translate(bundle.gen, sample_y, Domain::x, bundle.gen_cfg, noise));
        }
        checkpoint_save(ckpt_path, bundle_checkpoint(bundle, cfg));
        std::printf("trained %d steps, saved %s\n", cfg.steps, ckpt_path.c_str());
        return kExitOk;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumeric;
    }
}

int cmd_translate(const Overrides& overrides, const TranslateArgs& args) {
    RunConfig cfg;
    Generator<F> gen;
    Rgb8Image input;
    Domain target = Domain::y;
    try {
        if (args.ckpt.empty() || args.input.empty() || args.output.empty())
            throw Error("translate needs --ckpt, --input and --output");
        target = parse_domain(args.to_domain);
        auto ck = checkpoint_load(args.ckpt);
        cfg = config_with_overrides(ck, overrides);
        gen = make_generator<F>(cfg);
        restore_generator(gen, ck, /*allow_extra=*/true);
        input = load_image(args.input);
        if (input.w != cfg.image_size || input.h != cfg.image_size)
            throw Error("input image is " + std::to_string(input.w) + "x" +
                        std::to_string(input.h) + " but the checkpoint expects " +
                        std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    }

    try {
        NoGradGuard ng;
        Rng gumbel_rng(cfg.seed, "gumbel");
        Rng* noise = cfg.gumbel ? &gumbel_rng : nullptr;
        GenerationState<F> st;
        auto out = translate(gen, tensor_from_image<F>(input), target,
                             generation_config(cfg), noise, &st);
        save_image(args.output, image_from_tensor(out));
        std::printf("translated to domain %s in %s mode: transformer forwards %d, %.1f ms\n",
                    domain_name(target), cfg.mode.c_str(), st.forward_calls, st.wall_ms);
        std::printf("saved %s\n", args.output.c_str());
        return kExitOk;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumeric;
    }
}

int cmd_gradcheck(const RunConfig& cli_cfg) {
    // Gradient checks run in float64 on a reduced geometry; float32 rounding
    // would drown the finite-difference comparison.
    RunConfig cfg = cli_cfg;
    cfg.image_size = 8;
    cfg.latent_size = 2;
    cfg.latent_channels = 4;
    cfg.vae_base = 8;
    cfg.vocab = cfg.bitwise ? (1 << cfg.bitwise_d) : 8;
    cfg.width = 16;
    cfg.heads = 2;
    cfg.blocks = 2;
    cfg.disc_base = 4;
    try {
        config_validate(cfg);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    }

    try {
        auto b = make_bundle<double>(cfg);
        // Fresh blocks are exact identities (gates start at zero), which
        // would hide the attention path; move to a generic point first.
        Rng liven(cfg.seed, "liven");
        for (auto& blk : b.gen.tr.blocks) {
            blk.mod_w = Tensor<double>::randn(blk.mod_w.shape(), liven, 0.05, true);
            blk.mod_b = Tensor<double>::randn(blk.mod_b.shape(), liven, 0.05, true);
        }

        SyntheticDomainSpec spec{cfg.seed, cfg.image_size};
        DomainBatch<double> batch;
        batch.x.push_back(synth_image<double>(spec, Domain::x, 1).image);
        batch.y.push_back(synth_image<double>(spec, Domain::y, int64_t(1) << 40).image);

        auto& tr = b.gen.tr;
        std::vector<Tensor<double>> inputs{tr.head_w, tr.blocks[0].wq, tr.blocks.back().mod_w,
                                           b.gen.cond.t_x, b.gen.cond.s};
        const char* names[] = {"tr.head_w", "tr.blk0.wq", "tr.blk_last.mod_w", "cond.t_x",
                               "cond.s"};

        GradCheckConfig gc;
        // L1 and relu kinks crossing inside the central-difference window add
        // noise proportional to eps; a small step keeps any crossing under the
        // absolute floor while float64 roundoff stays orders below.
        gc.eps = 1e-7;
        gc.rel_tol = 1e-4;
        gc.abs_tol = 1e-6;
        gc.max_coords_per_input = 3;
        gc.seed = cfg.seed;

        // The finite-difference objective is the adversarial plus identity
        // slice, not the full objective: the cycle term re-enters the
        // tokenizer with a generated image, and a straight-through lookup
        // reports the pass-through gradient while the exact local derivative
        // of a snapped assignment is zero. No step size reconciles those two;
        // the re-entry path gets its own audit below instead.
        auto fd_loss = [&] {
            return add(mul_scalar(gan_generator_loss(b, batch), double(b.w.gan)),
                       mul_scalar(identity_loss(b, batch), double(b.w.idt)));
        };

        // Both decode paths: the start embedding only participates in serial
        // generation, and the cache path deserves its own differentiation audit.
        bool ok = true;
        for (auto mode : {GenerationConfig::Mode::parallel, GenerationConfig::Mode::serial}) {
            b.gen_cfg.mode = mode;
            b.gen_cfg.drop_ms_output = b.gen_cfg.drop_ms_context = false;
            const char* mode_name = mode == GenerationConfig::Mode::serial ? "serial" : "parallel";
            for (size_t i = 0; i < inputs.size(); ++i) {
                std::vector<Tensor<double>> one{inputs[i]};
                auto rep = grad_check([&](std::vector<Tensor<double>>&) { return fd_loss(); },
                                      one, gc);
                std::printf("gradcheck %-8s %-18s %-4s max_abs %.3e max_rel %.3e coords %d%s%s\n",
                            mode_name, names[i], rep.pass ? "pass" : "FAIL", rep.max_abs,
                            rep.max_rel, rep.coords_checked, rep.error.empty() ? "" : " ",
                            rep.error.c_str());
                ok = ok && rep.pass;
            }
        }

        // Re-entry audit: tokenizing a generated image must still pass
        // gradient back to the generator through the straight-through lookups.
        // This is the edge the cycle term depends on and the one finite
        // differences cannot certify.
        {
            b.gen_cfg.mode = GenerationConfig::Mode::serial;
            b.gen.cond.s.zero_grad();
            auto fake = translate(b.gen, batch.x[0], Domain::y, b.gen_cfg);
            auto pyr = tokenize_multiscale(b.gen.vae.encode(fake), b.gen.cb, b.gen.sched);
            auto ctx = build_context(pyr, b.gen.sched);
            backward(sum_all(ctx.back()));
            double s_peak = 0;
            for (double g : b.gen.cond.s.grad()) s_peak = std::max(s_peak, std::abs(g));
            const bool reentry_ok = s_peak > 0.0;
            std::printf("gradcheck reentry  cond.s             %-4s grad_peak %.3e\n",
                        reentry_ok ? "pass" : "FAIL", s_peak);
            ok = ok && reentry_ok;
        }

        // Hard argmax severs the whole transformer, the classifier head
        // included: those gradients must be exactly null while the encoder
        // and the looked-up codebook rows still receive signal. The soft runs
        // above left accumulated gradients behind; clear them first.
        b.gen.tr.visit_params([](Tensor<double>& p) { p.zero_grad(); });
        b.gen.cond.visit_params([](Tensor<double>& p) { p.zero_grad(); });
        b.gen.vae.visit_params([](Tensor<double>& p) { p.zero_grad(); });
        b.gen.cb.z.zero_grad();
        b.gen_cfg.hard = true;
        auto loss = total_generator_loss(b, batch);
        backward(loss);
        auto peak = [](const Tensor<double>& t) {
            double m = 0;
            for (double g : t.grad()) m = std::max(m, std::abs(g));
            return m;
        };
        double tr_peak = 0;
        tr.visit_params([&](Tensor<double>& p) { tr_peak = std::max(tr_peak, peak(p)); });
        const double live_peak = std::max(peak(b.gen.vae.enc[0].w), peak(b.gen.cb.z));
        const bool null_ok = tr_peak == 0.0 && live_peak > 0.0;
        std::printf("gradcheck hard-null transformer %-4s transformer_peak %.3e live_peak %.3e\n",
                    null_ok ? "pass" : "FAIL", tr_peak, live_peak);
        ok = ok && null_ok;

        std::printf("gradcheck %s\n", ok ? "passed" : "FAILED");
        return ok ? kExitOk : kExitNumeric;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumeric;
    }
}

int cmd_ablate(const Overrides& overrides, const AblateArgs& args) {
    RunConfig cfg;
    Generator<F> gen;
    try {
        if (args.ckpt.empty()) throw Error("ablate needs --ckpt");
        auto ck = checkpoint_load(args.ckpt);
        cfg = config_with_overrides(ck, overrides);
        gen = make_generator<F>(cfg);
        restore_generator(gen, ck, /*allow_extra=*/true);
        if (args.sweep != "temperature" && args.sweep != "mask" && args.sweep != "mode" &&
            args.sweep != "gumbel")
            throw Error("unknown sweep '" + args.sweep +
                        "' (expected temperature, mask, mode or gumbel)");
        ensure_out_dir(cfg.out_dir);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    }

    try {
        SyntheticDomainSpec spec{cfg.seed, cfg.image_size};
        auto kit = make_eval_kit(spec, cfg.eval_n);
        std::printf("domain classifier holdout accuracy %.3f\n", kit.clf_holdout);

        struct Cell {
            std::string setting;
            GenerationConfig gc;
            bool gumbel = false;
        };
        std::vector<Cell> cells;
        const GenerationConfig base = generation_config(cfg);
        if (args.sweep == "temperature") {
            for (double tau : {0.01, 0.1, 0.7, 1.0, 2.0, 10.0, 1e4}) {
                char label[32];
                std::snprintf(label, sizeof label, "tau=%g", tau);
                Cell c{label, base, false};
                c.gc.srq.tau = tau;
                cells.push_back(std::move(c));
            }
        } else if (args.sweep == "mask") {
            for (int m = 0; m < 3; ++m) {
                Cell c{m == 0 ? "none" : m == 1 ? "drop_ms_output" : "drop_both", base, false};
                c.gc.mode = GenerationConfig::Mode::parallel;
                c.gc.drop_ms_output = m >= 1;
                c.gc.drop_ms_context = m == 2;
                cells.push_back(std::move(c));
            }
        } else if (args.sweep == "mode") {
            for (auto mode : {GenerationConfig::Mode::serial, GenerationConfig::Mode::parallel}) {
                Cell c{mode == GenerationConfig::Mode::serial ? "serial" : "parallel", base,
                       false};
                c.gc.mode = mode;
                c.gc.drop_ms_output = c.gc.drop_ms_context = false;
                cells.push_back(std::move(c));
            }
        } else {  // gumbel
            for (bool g : {false, true}) {
                Cell c{g ? "gumbel=on" : "gumbel=off", base, g};
                c.gc.srq.gumbel = g;
                cells.push_back(std::move(c));
            }
        }

        const std::string csv_path = cfg.out_dir + "/ablate_" + args.sweep + ".csv";
        auto csv = open_csv(csv_path, "setting,fid_proxy,struct_dist,domain_acc,wall_ms");
        std::printf("%-18s %10s %12s %11s %9s\n", "setting", "fid_proxy", "struct_dist",
                    "domain_acc", "wall_ms");
        for (const auto& cell : cells) {
            Rng gumbel_rng(cfg.seed, "gumbel");
            auto ev = eval_translation(gen, cell.gc, kit, cell.gumbel ? &gumbel_rng : nullptr);
            csv << cell.setting << "," << ev.metrics.fid_proxy << "," << ev.metrics.struct_dist
                << "," << ev.metrics.domain_acc << "," << ev.wall_ms_per_image << "\n";
            std::printf("%-18s %10.4f %12.4f %11.3f %9.1f\n", cell.setting.c_str(),
                        ev.metrics.fid_proxy, ev.metrics.struct_dist, ev.metrics.domain_acc,
                        ev.wall_ms_per_image);
            std::fflush(stdout);
        }
        std::printf("wrote %s\n", csv_path.c_str());
        return kExitOk;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumeric;
    }
}

int cmd_bench(const RunConfig& cli_cfg, const BenchArgs& args) {
    RunConfig cfg = cli_cfg;
    Generator<F> gen;
    try {
        if (!args.ckpt.empty()) {
            auto ck = checkpoint_load(args.ckpt);
            cfg = checkpoint_config(ck);
            cfg.repeats = cli_cfg.repeats;
            cfg.bench_warmup = cli_cfg.bench_warmup;
            cfg.out_dir = cli_cfg.out_dir;
            gen = make_generator<F>(cfg);
            restore_generator(gen, ck, /*allow_extra=*/true);
        } else {
            config_validate(cfg);
            gen = make_generator<F>(cfg);
        }
        ensure_out_dir(cfg.out_dir);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitUsage;
    }

    try {
        SyntheticDomainSpec spec{cfg.seed, cfg.image_size};
        auto image = synth_image<F>(spec, Domain::x, 0).image;

        BenchConfig bc;
        bc.repeats = cfg.repeats;
        bc.warmup = cfg.bench_warmup;
        bc.gen = generation_config(cfg);
        auto pair = bench_modes(gen, image, bc);

        std::printf("%s\n", bench_csv_header().c_str());
        std::printf("%s\n", bench_csv_row(pair.serial).c_str());
        std::printf("%s\n", bench_csv_row(pair.parallel).c_str());

        auto csv = open_csv(cfg.out_dir + "/bench.csv", bench_csv_header());
        csv << bench_csv_row(pair.serial) << "\n" << bench_csv_row(pair.parallel) << "\n";

        nlohmann::json j;
        j["serial"] = to_json(pair.serial);
        j["parallel"] = to_json(pair.parallel);
        j["repeats"] = cfg.repeats;
        j["image_size"] = cfg.image_size;
        std::ofstream js(cfg.out_dir + "/bench.json");
        js << j.dump(2) << "\n";
        std::printf("wrote %s/bench.json\n", cfg.out_dir.c_str());
        return kExitOk;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumeric;
    }
}

}  // namespace cyclevar
