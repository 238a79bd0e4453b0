#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "cyclevar/gradcheck.hpp"
#include "cyclevar/synth.hpp"
#include "cyclevar/tokenizer.hpp"

using namespace cyclevar;

using TD = Tensor<double>;
using TF = Tensor<float>;

namespace {

double l2_dist(const TD& a, const TD& b) {
    NoGradGuard ng;
    auto d = sub(a, b);
    return std::sqrt(sum_all(mul(d, d)).item());
}

TD const_latent(const std::vector<double>& per_channel, int h, int w) {
    const int c = int(per_channel.size());
    std::vector<double> vals(size_t(c) * h * w);
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < h * w; ++i) vals[size_t(ch) * h * w + i] = per_channel[size_t(ch)];
    return TD::leaf({c, h, w}, std::move(vals));
}

}  // namespace

TEST_CASE("vae encode/decode shape contract and determinism") {
    Rng rng(11, "vae-shape");
    auto vae = Vae<float>::make(32, 8, 16, 32, rng);

    SyntheticDomainSpec spec;
    auto img = synth_image<float>(spec, Domain::x, 0).image;
    auto e = vae.encode(img);
    CHECK(e.shape() == Shape{16, 8, 8});

    auto e2 = vae.encode(img);
    CHECK(e.val() == e2.val());

    auto zero = TF::zeros({3, 32, 32});
    auto ez = vae.encode(zero);
    for (float v : ez.val()) CHECK(std::isfinite(v));

    auto rec = vae.decode(e);
    CHECK(rec.shape() == Shape{3, 32, 32});
    for (float v : rec.val()) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
    }
    auto rec2 = vae.decode(e);
    CHECK(rec.val() == rec2.val());

    CHECK_THROWS_AS((void)vae.encode(TF::zeros({3, 16, 16})), Error);
    CHECK_THROWS_AS((void)vae.decode(TF::zeros({16, 4, 4})), Error);
}

TEST_CASE("decode gradient passes finite differences") {
    Rng rng(23, "vae-grad");
    auto vae = Vae<double>::make(8, 2, 4, 8, rng);
    std::vector<TD> inputs{TD::randn({4, 2, 2}, rng, 1.0, true)};
    auto rep = grad_check<double>(
        [&](const std::vector<TD>& in) { return mean_all(vae.decode(in[0])); }, inputs);
    INFO(rep.error, " worst=", rep.worst, " rel=", rep.max_rel);
    CHECK(rep.pass);
}

TEST_CASE("resize up then down leaves constants unchanged") {
    auto base = TD::full({3, 4, 4}, 0.37);
    auto up = resize(base, 8, 8, ResizeMode::bilinear);
    auto down = resize(up, 4, 4, ResizeMode::area);
    for (double v : down.val()) CHECK(v == doctest::Approx(0.37).epsilon(1e-12));

    auto up_n = resize(base, 8, 8, ResizeMode::nearest);
    auto down_n = resize(up_n, 4, 4, ResizeMode::area);
    for (double v : down_n.val()) CHECK(v == doctest::Approx(0.37).epsilon(1e-12));
}

TEST_CASE("single-scale schedule degenerates to sitewise lookup") {
    Rng rng(31, "tok-k1");
    auto cb = Codebook<double>::random(7, 3, rng);
    auto e = TD::randn({3, 4, 4}, rng, 1.0);
    ScaleSchedule sched;
    sched.sizes = {{4, 4}};

    auto pyr = tokenize_multiscale(e, cb, sched);
    REQUIRE(pyr.R.size() == 1);
    auto direct = tokens_to_chw(ste_lookup(chw_to_tokens(e), cb), 4, 4);
    CHECK(pyr.R[0].val() == direct.val());
}

TEST_CASE("constant field representable by one code fits exactly") {
    // codebook holds the field's value and the zero vector; everything else far away
    std::vector<double> z{0.4, -0.3, 0.0, 0.0, 1.2, 0.9, -0.8, 1.1};
    Codebook<double> cb(TD::leaf({4, 2}, std::move(z)));
    auto e = const_latent({0.4, -0.3}, 8, 8);
    auto sched = ScaleSchedule::pow2_square(8);

    auto pyr = tokenize_multiscale(e, cb, sched);
    REQUIRE(pyr.R.size() == 4);
    CHECK(pyr.R[0].val() == std::vector<double>{0.4, -0.3});
    for (size_t k = 1; k < 4; ++k)
        for (double v : pyr.R[k].val()) CHECK(v == 0.0);

    CHECK(l2_dist(e, residual_sum(pyr, sched)) == 0.0);
}

TEST_CASE("reconstruction error is non-increasing in the scale count") {
    Rng cbrng(47, "tok-mono-cb");
    auto cb = Codebook<double>::random(24, 4, cbrng, 0.5);
    for (int j = 0; j < 4; ++j) cb.z.val()[size_t(j)] = 0.0;  // keep a zero code available
    auto sched = ScaleSchedule::pow2_square(8);

    for (uint64_t seed : {101, 202, 303}) {
        Rng rng(seed, "tok-mono-e");
        auto e = TD::randn({4, 8, 8}, rng, 1.0);
        auto pyr = tokenize_multiscale(e, cb, sched);

        NoGradGuard ng;
        TD partial = resize(pyr.R[0], 8, 8, sched.up_mode);
        double prev = l2_dist(e, partial);
        for (size_t k = 1; k < pyr.R.size(); ++k) {
            partial = add(partial, resize(pyr.R[k], 8, 8, sched.up_mode));
            const double err = l2_dist(e, partial);
            INFO("seed=", seed, " K=", k + 1, " err=", err, " prev=", prev);
            CHECK(err <= prev + 1e-12);
            prev = err;
        }
    }
}

TEST_CASE("context maps: degenerate, constant, and endpoint cases") {
    SUBCASE("K=1 context equals the single residual map") {
        Rng rng(53, "ctx-k1");
        auto cb = Codebook<double>::random(6, 3, rng);
        auto e = TD::randn({3, 4, 4}, rng, 1.0);
        ScaleSchedule sched;
        sched.sizes = {{4, 4}};
        auto pyr = tokenize_multiscale(e, cb, sched);
        auto f = build_context(pyr, sched);
        REQUIRE(f.size() == 1);
        CHECK(f[0].val() == pyr.R[0].val());
    }

    SUBCASE("constant residual maps sum into constant context maps") {
        ScaleSchedule sched;
        sched.sizes = {{1, 1}, {4, 4}};
        ResidualPyramid<double> pyr;
        pyr.E = TD::zeros({2, 4, 4});
        pyr.R.push_back(const_latent({0.25, -0.5}, 1, 1));
        pyr.R.push_back(const_latent({0.1, 0.3}, 4, 4));
        auto f = build_context(pyr, sched);
        REQUIRE(f.size() == 2);
        const double want[2] = {0.35, -0.2};
        for (size_t k = 0; k < 2; ++k) {
            const auto& fv = f[k].val();
            const int hw = int(fv.size()) / 2;
            for (int ch = 0; ch < 2; ++ch)
                for (int i = 0; i < hw; ++i)
                    CHECK(fv[size_t(ch) * hw + i] == doctest::Approx(want[ch]).epsilon(1e-12));
        }
    }

    SUBCASE("finest context map equals the accumulated sum exactly") {
        Rng rng(59, "ctx-end");
        auto cb = Codebook<double>::random(8, 3, rng);
        auto e = TD::randn({3, 8, 8}, rng, 1.0);
        auto sched = ScaleSchedule::pow2_square(8);
        auto pyr = tokenize_multiscale(e, cb, sched);
        pyr.F = build_context(pyr, sched);
        auto s = residual_sum(pyr, sched);
        CHECK(pyr.F.back().val() == s.val());
        for (const auto& f : pyr.F)
            for (double v : f.val()) CHECK(std::isfinite(v));
    }
}

TEST_CASE("straight-through gradients match the identity-substituted function") {
    Rng rng(61, "ste-contract");
    auto cb = Codebook<double>::random(6, 3, rng, 0.8);
    auto sched = ScaleSchedule::pow2_square(4);
    auto e = TD::randn({3, 4, 4}, rng, 1.0, true);
    auto wconst = TD::randn({3, 4, 4}, rng, 1.0, false);

    auto loss_of = [&](const TD& latent, StePlan<double>* plan) {
        auto pyr = tokenize_multiscale(latent, cb, sched, plan);
        return sum_all(mul(residual_sum(pyr, sched), wconst));
    };

    // record the code choices with the real straight-through tape
    StePlan<double> plan;
    backward(loss_of(e, &plan));
    const std::vector<double> ste_grad = e.grad();
    double peak = 0;
    for (double g : ste_grad) peak = std::max(peak, std::fabs(g));
    CHECK(peak > 0.1);

    // replaying the plan substitutes each lookup by identity plus a constant;
    // its tape gradient must be bitwise what the straight-through tape produced
    e.zero_grad();
    plan.rewind();
    backward(loss_of(e, &plan));
    CHECK(e.grad() == ste_grad);

    // and the replayed function is smooth, so finite differences agree too
    std::vector<TD> inputs{e};
    auto rep = grad_check<double>(
        [&](const std::vector<TD>& in) {
            plan.rewind();
            return loss_of(in[0], &plan);
        },
        inputs);
    INFO(rep.error, " worst=", rep.worst, " rel=", rep.max_rel);
    CHECK(rep.pass);
}

TEST_CASE("synthetic domains share geometry and differ in palette") {
    SyntheticDomainSpec spec;
    spec.seed = 5;

    auto a = synth_sample<float>(spec, 3, Domain::x);
    auto b = synth_sample<float>(spec, 3, Domain::x);
    auto c = synth_sample<float>(spec, 3, Domain::y);
    REQUIRE(a.size() == 3);

    for (size_t i = 0; i < 3; ++i) {
        CHECK(a[i].image.val() == b[i].image.val());

        REQUIRE(a[i].meta.shapes.size() == c[i].meta.shapes.size());
        for (size_t s = 0; s < a[i].meta.shapes.size(); ++s) {
            CHECK(a[i].meta.shapes[s].kind == c[i].meta.shapes[s].kind);
            CHECK(a[i].meta.shapes[s].cx == c[i].meta.shapes[s].cx);
            CHECK(a[i].meta.shapes[s].rx == c[i].meta.shapes[s].rx);
        }

        double diff = 0;
        for (size_t j = 0; j < a[i].image.val().size(); ++j)
            diff = std::max(diff, std::fabs(double(a[i].image.val()[j]) - c[i].image.val()[j]));
        CHECK(diff > 0.05);

        for (float v : a[i].image.val()) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
}

TEST_CASE("pretraining reaches the reconstruction and usage gates") {
    Rng rng(77, "pretrain");
    auto vae = Vae<float>::make(32, 8, 16, 32, rng);
    auto cb = Codebook<float>::random(64, 16, rng, 0.5);
    auto sched = ScaleSchedule::pow2_square(8);

    SyntheticDomainSpec spec;
    spec.seed = 99;
    auto sample = [&spec](int64_t index) {
        const Domain d = (index % 2 == 0) ? Domain::x : Domain::y;
        return synth_image<float>(spec, d, index / 2).image;
    };

    PretrainConfig pc;
    pc.steps = 700;
    auto report = pretrain_tokenizer(vae, cb, sched, sample, pc);
    REQUIRE(report.ok);
    CHECK(report.steps_run == pc.steps);

    const int64_t held_out = int64_t(1) << 20;
    const double l1 = tokenizer_eval_l1(vae, cb, sched, sample, 64, held_out);
    const double usage = codebook_usage(vae, cb, sched, sample, 64, held_out);
    std::printf("pretrain: final_loss=%.4f held_out_l1=%.4f usage=%.3f\n", report.final_loss, l1,
                usage);
    CHECK(l1 <= 0.08);
    CHECK(usage >= 0.5);
}

TEST_CASE("pretraining aborts on nonfinite loss") {
    Rng rng(83, "pretrain-blowup");
    auto vae = Vae<float>::make(8, 2, 4, 8, rng);
    auto cb = Codebook<float>::random(8, 4, rng, 0.5);
    auto sched = ScaleSchedule::pow2_square(2);

    SyntheticDomainSpec spec;
    spec.image_size = 8;
    auto sample = [&spec](int64_t index) { return synth_image<float>(spec, Domain::x, index).image; };

    PretrainConfig pc;
    pc.steps = 50;
    pc.batch = 2;
    pc.lr = 1e7;
    pc.warmup = 0;
    pc.revive_every = 0;
    auto report = pretrain_tokenizer(vae, cb, sched, sample, pc);
    CHECK_FALSE(report.ok);
    CHECK(report.error.find("nonfinite") != std::string::npos);
    CHECK(report.steps_run < pc.steps);
}
