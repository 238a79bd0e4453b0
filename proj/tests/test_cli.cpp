#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include <json.hpp>

#include "cyclevar/commands.hpp"
#include "cyclevar/image_io.hpp"
#include "cyclevar/pipeline.hpp"
#include "cyclevar/synth.hpp"

using namespace cyclevar;

namespace fs = std::filesystem;

namespace {

std::string fresh_dir(const std::string& name) {
    const std::string dir = (fs::temp_directory_path() / ("cyclevar_test_" + name)).string();
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(bool(in));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(bool(in));
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
}

RunConfig tiny_cfg(const std::string& out_dir, uint64_t seed = 11) {
    RunConfig c;
    c.image_size = 8;
    c.latent_size = 2;
    c.latent_channels = 4;
    c.vae_base = 8;
    c.vocab = 8;
    c.width = 16;
    c.heads = 2;
    c.blocks = 2;
    c.disc_base = 4;
    c.pretrain_steps = 30;
    c.pretrain_batch = 4;
    c.steps = 4;
    c.batch = 2;
    c.eval_n = 6;
    c.eval_every = 1000;
    c.log_every = 10;
    c.seed = seed;
    c.out_dir = out_dir;
    return c;
}

template <class M>
std::vector<float> flatten_params(M& m) {
    std::vector<float> out;
    for_each_named_param(m, [&](const std::string&, Tensor<float>& t) {
        for (float v : t.val()) out.push_back(v);
    });
    return out;
}

}  // namespace

TEST_CASE("config: typed parsing and unknown keys") {
    RunConfig c;
    config_apply(c, "tau", "0.25");
    config_apply(c, "steps", "17");
    config_apply(c, "gumbel", "true");
    config_apply(c, "mode", "serial");
    config_apply(c, "seed", "99");
    CHECK(c.tau == 0.25);
    CHECK(c.steps == 17);
    CHECK(c.gumbel);
    CHECK(c.mode == "serial");
    CHECK(c.seed == 99);

    CHECK_THROWS_WITH_AS(config_apply(c, "bogus_key", "1"),
                         doctest::Contains("unknown key"), Error);
    CHECK_THROWS_WITH_AS(config_apply(c, "steps", "12x"),
                         doctest::Contains("expects an integer"), Error);
    CHECK_THROWS_WITH_AS(config_apply(c, "tau", "warm"),
                         doctest::Contains("expects a number"), Error);
    CHECK_THROWS_WITH_AS(config_apply(c, "gumbel", "maybe"),
                         doctest::Contains("expects a boolean"), Error);
}

TEST_CASE("config: validation names the offending key") {
    RunConfig c;
    config_validate(c);  // defaults are a working setup

    auto expect_fail = [](RunConfig bad, const char* needle) {
        CHECK_THROWS_WITH_AS(config_validate(bad), doctest::Contains(needle), Error);
    };
    {
        RunConfig b;
        b.tau = 0.0;
        expect_fail(b, "tau must be > 0");
    }
    {
        RunConfig b;
        b.fusion_a = 1.5;
        expect_fail(b, "fusion_a");
    }
    {
        RunConfig b;
        b.mode = "turbo";
        expect_fail(b, "mode must be");
    }
    {
        RunConfig b;
        b.width = 30;  // heads 4
        expect_fail(b, "divisible by heads");
    }
    {
        RunConfig b;
        b.mode = "serial";
        b.drop_ms_output = true;
        expect_fail(b, "parallel mode");
    }
    {
        RunConfig b;
        b.image_size = 24;  // latent 8 -> ratio 3
        expect_fail(b, "power of two");
    }
}

TEST_CASE("config: file load with comments and dump round trip") {
    const std::string dir = fresh_dir("config");
    const std::string path = dir + "/run.cfg";
    {
        std::ofstream out(path);
        out << "# comment line\n"
            << "tau = 0.7   # trailing comment\n"
            << "\n"
            << "mode=serial\n"
            << "steps=12\n";
    }
    RunConfig c = config_load(path);
    CHECK(c.tau == 0.7);
    CHECK(c.mode == "serial");
    CHECK(c.steps == 12);
    CHECK(c.batch == RunConfig{}.batch);  // untouched keys keep defaults

    // dump -> reapply lands on the identical dump
    auto lines = config_dump(c);
    RunConfig back;
    for (const auto& line : lines) {
        size_t eq = line.find('=');
        config_apply(back, line.substr(0, eq), line.substr(eq + 1));
    }
    CHECK(config_dump(back) == lines);

    {
        std::ofstream out(path);
        out << "tau\n";
    }
    CHECK_THROWS_WITH_AS(config_load(path), doctest::Contains("expected key=value"), Error);
    CHECK_THROWS_WITH_AS(config_load(dir + "/absent.cfg"), doctest::Contains("cannot open"),
                         Error);
    fs::remove_all(dir);
}

TEST_CASE("image io: round-half-up quantization and byte round trips") {
    // exact byte mapping: v*255 rounded half away from zero, clamped
    std::vector<double> chw = {0.0,  1.0,  0.5,       127.0 / 255.0,
                               -0.2, 1.7,  0.0019607, 0.0019609,
                               0.25, 0.75, 1.0 / 3.0, 2.0 / 3.0};
    auto img = rgb8_from_planar(chw, 2, 2);
    CHECK(img.pix.size() == 12);
    // planar -> interleaved: site 0 holds channels {0,4,8}
    CHECK(img.pix[0] == 0);      // 0.0
    CHECK(img.pix[1] == 0);      // -0.2 clamps
    CHECK(img.pix[2] == 64);     // 0.25 -> 63.75 +.5 -> 64
    CHECK(img.pix[3] == 255);    // 1.0
    CHECK(img.pix[4] == 255);    // 1.7 clamps
    CHECK(img.pix[5] == 191);    // 0.75 -> 191.25 -> 191
    CHECK(img.pix[6] == 128);    // 0.5 -> 127.5 rounds up
    CHECK(img.pix[7] == 0);      // 0.0019607 -> 0.4999... -> 0
    CHECK(img.pix[8] == 85);     // 1/3 -> 85.0
    CHECK(img.pix[9] == 127);    // 127/255 exact lattice point
    CHECK(img.pix[10] == 1);     // 0.0019609 -> 0.5000.. -> 1
    CHECK(img.pix[11] == 170);   // 2/3 -> 170.0

    // bytes -> floats -> bytes is the identity
    auto back = rgb8_from_planar(planar_from_rgb8(img), 2, 2);
    CHECK(back.pix == img.pix);

    const std::string dir = fresh_dir("image");
    SyntheticDomainSpec spec{5, 8};
    auto tens = synth_image<float>(spec, Domain::x, 3).image;
    auto as_bytes = image_from_tensor(tens);

    save_image(dir + "/a.ppm", as_bytes);
    auto ppm = load_image(dir + "/a.ppm");
    CHECK(ppm.w == 8);
    CHECK(ppm.h == 8);
    CHECK(ppm.pix == as_bytes.pix);

    if (png_supported()) {
        save_image(dir + "/a.png", as_bytes);
        auto png = load_image(dir + "/a.png");
        CHECK(png.w == 8);
        CHECK(png.pix == as_bytes.pix);
    }

    // tensor -> bytes -> tensor stays within half a quantization step
    auto round_trip = tensor_from_image<float>(as_bytes);
    double worst = 0;
    for (size_t i = 0; i < tens.val().size(); ++i)
        worst = std::max(worst, std::abs(double(tens.val()[i]) - double(round_trip.val()[i])));
    CHECK(worst <= 0.5 / 255.0 + 1e-7);

    CHECK_THROWS_WITH_AS(load_image(dir + "/missing.ppm"), doctest::Contains("cannot open"),
                         Error);
    {
        std::ofstream out(dir + "/bad.ppm", std::ios::binary);
        out << "P6\n4 4\n255\nshort";
    }
    CHECK_THROWS_WITH_AS(load_image(dir + "/bad.ppm"), doctest::Contains("truncated"), Error);
    fs::remove_all(dir);
}

TEST_CASE("checkpoint: byte-identical resave, hash guard, manifest checks") {
    const std::string dir = fresh_dir("ckpt");
    CheckpointData ck;
    ck.config = {"tau=2", "mode=parallel"};
    ck.tensors.push_back({"a.w", {2, 3}, {1.f, 2.f, 3.f, 4.f, 5.f, 6.f}});
    ck.tensors.push_back({"a.b", {3}, {0.25f, -1.f, 9.f}});

    const std::string p1 = dir + "/one.ckpt";
    const std::string p2 = dir + "/two.ckpt";
    checkpoint_save(p1, ck);
    auto loaded = checkpoint_load(p1);
    checkpoint_save(p2, loaded);
    CHECK(read_bytes(p1) == read_bytes(p2));

    REQUIRE(loaded.tensors.size() == 2);
    CHECK(loaded.config == ck.config);
    CHECK(loaded.tensors[0].name == "a.w");
    CHECK(loaded.tensors[0].shape == std::vector<size_t>{2, 3});
    CHECK(loaded.tensors[0].data == ck.tensors[0].data);
    CHECK(loaded.tensors[1].data == ck.tensors[1].data);

    // flip one payload byte: the hash guard must refuse the file
    {
        std::string bytes = read_bytes(p1);
        bytes[bytes.size() - 3] = char(bytes[bytes.size() - 3] ^ 0x40);
        std::ofstream out(p1, std::ios::binary);
        out << bytes;
    }
    CHECK_THROWS_WITH_AS(checkpoint_load(p1), doctest::Contains("corrupt"), Error);

    {
        std::ofstream out(dir + "/not.ckpt", std::ios::binary);
        out << "HELLO";
    }
    CHECK_THROWS_WITH_AS(checkpoint_load(dir + "/not.ckpt"),
                         doctest::Contains("not a CYCKPT1"), Error);

    CheckpointData bad = ck;
    bad.tensors[0].data.pop_back();
    CHECK_THROWS_WITH_AS(checkpoint_save(p2, bad), doctest::Contains("shape/data mismatch"),
                         Error);
    fs::remove_all(dir);
}

TEST_CASE("pipeline: construction is seed-deterministic") {
    const auto cfg = tiny_cfg("/tmp/unused");
    auto b1 = make_bundle<float>(cfg);
    auto b2 = make_bundle<float>(cfg);
    CHECK(flatten_params(b1) == flatten_params(b2));

    RunConfig other = cfg;
    other.seed = 12;
    auto b3 = make_bundle<float>(other);
    CHECK(flatten_params(b1) != flatten_params(b3));
}

TEST_CASE("pipeline: bundle round trip and generator cover load") {
    const std::string dir = fresh_dir("pipeline");
    auto cfg = tiny_cfg(dir, 21);
    auto b = make_bundle<float>(cfg);
    const auto want = flatten_params(b);

    const std::string path = dir + "/bundle.ckpt";
    checkpoint_save(path, bundle_checkpoint(b, cfg));

    // a different seed gives different weights; restore must overwrite them all
    RunConfig cfg2 = cfg;
    cfg2.seed = 22;
    auto fresh = make_bundle<float>(cfg2);
    CHECK(flatten_params(fresh) != want);
    auto ck = checkpoint_load(path);
    restore_bundle(fresh, ck);
    CHECK(flatten_params(fresh) == want);

    // full-bundle file feeding a generator-only walk (discriminators unused)
    RunConfig got_cfg;
    auto gen = generator_from_checkpoint<float>(ck, &got_cfg);
    CHECK(got_cfg.seed == 21);
    std::vector<float> gen_want;
    for_each_named_param(b.gen, [&](const std::string&, Tensor<float>& t) {
        for (float v : t.val()) gen_want.push_back(v);
    });
    std::vector<float> gen_got;
    for_each_named_param(gen, [&](const std::string&, Tensor<float>& t) {
        for (float v : t.val()) gen_got.push_back(v);
    });
    CHECK(gen_got == gen_want);

    // strict restore refuses leftovers and missing or reshaped entries
    CHECK_THROWS_WITH_AS(restore_generator(gen, ck, /*allow_extra=*/false),
                         doctest::Contains("consumed"), Error);
    CheckpointData missing = ck;
    missing.tensors.pop_back();  // proxy layer record, unused by the generator walk
    missing.tensors.erase(missing.tensors.begin());  // vae.enc0.w, required
    CHECK_THROWS_WITH_AS(restore_generator(gen, missing, true),
                         doctest::Contains("missing tensor"), Error);
    CheckpointData reshaped = ck;
    reshaped.tensors[0].shape = {1, reshaped.tensors[0].data.size()};
    CHECK_THROWS_WITH_AS(restore_generator(gen, reshaped, true),
                         doctest::Contains("different shape"), Error);
    fs::remove_all(dir);
}

TEST_CASE("commands: pretrain, train, translate chain with artifacts") {
    const std::string dir = fresh_dir("cmd_chain");
    auto cfg = tiny_cfg(dir);

    REQUIRE(cmd_pretrain_tokenizer(cfg) == kExitOk);
    CHECK(fs::exists(dir + "/tokenizer.ckpt"));
    {
        auto lines = read_lines(dir + "/tokenizer_metrics.csv");
        REQUIRE(!lines.empty());
        CHECK(lines[0] == "step,loss");
        CHECK(lines.size() == 4);  // 30 steps at cadence 10
    }

    TrainArgs ta;
    ta.tokenizer_ckpt = dir + "/tokenizer.ckpt";
    REQUIRE(cmd_train(cfg, ta) == kExitOk);
    CHECK(fs::exists(dir + "/translator.ckpt"));
    const std::string ext = png_supported() ? ".png" : ".ppm";
    CHECK(fs::exists(dir + "/sample_x" + ext));
    CHECK(fs::exists(dir + "/sample_x_to_y" + ext));
    {
        auto lines = read_lines(dir + "/train_metrics.csv");
        REQUIRE(lines.size() == size_t(1 + cfg.steps));
        CHECK(lines[0] == "step,cycle,gan_g,dis,idt,grad_norm,wall_ms");
        auto ev = read_lines(dir + "/eval_metrics.csv");
        CHECK(ev[0] == "step,fid_proxy,struct_dist,domain_acc");
        CHECK(ev.size() == 2);  // final eval only at this cadence
    }

    // the tokenizer inside the translator checkpoint is the pretrained one
    {
        auto tok = checkpoint_load(dir + "/tokenizer.ckpt");
        auto full = checkpoint_load(dir + "/translator.ckpt");
        REQUIRE(!tok.tensors.empty());
        CHECK(full.tensors[0].name == tok.tensors[0].name);
        CHECK(full.tensors[0].data == tok.tensors[0].data);
    }

    TranslateArgs tr;
    tr.ckpt = dir + "/translator.ckpt";
    tr.input = dir + "/sample_x" + ext;
    tr.output = dir + "/out_a" + ext;
    REQUIRE(cmd_translate({}, tr) == kExitOk);
    tr.output = dir + "/out_b" + ext;
    REQUIRE(cmd_translate({}, tr) == kExitOk);
    CHECK(read_bytes(dir + "/out_a" + ext) == read_bytes(dir + "/out_b" + ext));

    // serial override reaches the generator: different mode, same image size
    tr.output = dir + "/out_serial" + ext;
    REQUIRE(cmd_translate({"mode=serial"}, tr) == kExitOk);
    auto serial_img = load_image(dir + "/out_serial" + ext);
    CHECK(serial_img.w == cfg.image_size);

    tr.to_domain = "z";
    CHECK(cmd_translate({}, tr) == kExitUsage);
    tr.to_domain = "x";
    tr.input = dir + "/missing" + ext;
    CHECK(cmd_translate({}, tr) == kExitUsage);

    TrainArgs bad;
    bad.tokenizer_ckpt = dir + "/absent.ckpt";
    CHECK(cmd_train(cfg, bad) == kExitUsage);

    // sweeps over the trained checkpoint
    AblateArgs aa;
    aa.ckpt = dir + "/translator.ckpt";
    aa.sweep = "mode";
    Overrides ov{"eval_n=4", "out_dir=" + dir};
    REQUIRE(cmd_ablate(ov, aa) == kExitOk);
    {
        auto lines = read_lines(dir + "/ablate_mode.csv");
        REQUIRE(lines.size() == 3);
        CHECK(lines[0] == "setting,fid_proxy,struct_dist,domain_acc,wall_ms");
        CHECK(lines[1].substr(0, 7) == "serial,");
        CHECK(lines[2].substr(0, 9) == "parallel,");
    }
    aa.sweep = "bogus";
    CHECK(cmd_ablate(ov, aa) == kExitUsage);
    fs::remove_all(dir);
}

TEST_CASE("commands: gradcheck passes and bench writes reports") {
    const std::string dir = fresh_dir("cmd_gb");
    auto cfg = tiny_cfg(dir, 5);
    CHECK(cmd_gradcheck(cfg) == kExitOk);

    cfg.repeats = 3;
    cfg.bench_warmup = 1;
    REQUIRE(cmd_bench(cfg, BenchArgs{}) == kExitOk);
    auto lines = read_lines(dir + "/bench.csv");
    REQUIRE(lines.size() == 3);
    CHECK(lines[0] == "mode,K,mean_s,std_s,forwards");
    nlohmann::json j;
    {
        std::ifstream in(dir + "/bench.json");
        in >> j;
    }
    CHECK(j["serial"]["forwards"].get<int>() == 2);  // K=2 at this geometry
    CHECK(j["parallel"]["forwards"].get<int>() == 1);
    CHECK(j["serial"]["mean_s"].get<double>() > 0.0);
    fs::remove_all(dir);
}

#ifdef CYCLEVAR_CLI_PATH
TEST_CASE("cli binary: end-to-end drive") {
    const std::string dir = fresh_dir("cli_bin");
    const std::string bin = CYCLEVAR_CLI_PATH;
    const std::string tiny =
        " --image-size 8 --latent-size 2 --latent-channels 4 --vae-base 8 --vocab 8";
    auto run = [&](const std::string& args) {
        const std::string cmd = bin + " " + args + " >" + dir + "/stdout.txt 2>&1";
        const int rc = std::system(cmd.c_str());
        return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    };

    REQUIRE(run("pretrain-tokenizer" + tiny + " --steps 20 --batch 4 --out-dir " + dir) == 0);
    REQUIRE(run("train --steps 2 --batch 2 --width 16 --heads 2 --blocks 2 --disc-base 4"
                " --eval-n 4 --tokenizer-ckpt " + dir + "/tokenizer.ckpt --out-dir " + dir) == 0);
    const std::string ext = png_supported() ? ".png" : ".ppm";
    REQUIRE(run("translate --ckpt " + dir + "/translator.ckpt --to-domain y --input " + dir +
                "/sample_x" + ext + " --output " + dir + "/translated" + ext) == 0);
    CHECK(fs::exists(dir + "/translated" + ext));
    {
        auto text = read_bytes(dir + "/stdout.txt");
        CHECK(text.find("transformer forwards 1") != std::string::npos);
    }
    CHECK(run("bench" + tiny + " --width 16 --heads 2 --blocks 2 --repeats 2 --out-dir " + dir) ==
          0);
    CHECK(fs::exists(dir + "/bench.json"));

    CHECK(run("translate --ckpt " + dir + "/translator.ckpt --to-domain q --input " + dir +
              "/sample_x" + ext + " --output /tmp/q" + ext) == 1);
    CHECK(run("train --steps 1 --tokenizer-ckpt " + dir + "/nope.ckpt --out-dir " + dir) == 1);
    CHECK(run("definitely-not-a-command") == 1);
    fs::remove_all(dir);
}
#endif
