#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cyclevar/gradcheck.hpp"
#include "cyclevar/ops_registry.hpp"
#include "cyclevar/quantizer.hpp"

using namespace cyclevar;

using TD = Tensor<double>;

namespace {

Codebook<double> small_codebook() {
    // rows (0,0) and (1,1)
    return Codebook<double>(TD::leaf({2, 2}, {0, 0, 1, 1}, false));
}

Codebook<double> random_codebook(int v, int c, uint64_t seed, bool trainable = false) {
    Rng rng(seed, "cb");
    return Codebook<double>::random(v, c, rng, 0.8, trainable);
}

}  // namespace

TEST_CASE("nearest_code picks the closest row, ties to lowest index") {
    auto cb = small_codebook();
    auto f = TD::leaf({1, 2}, {0.1, 0.2}, false);
    CHECK(nearest_code(f, cb.z) == std::vector<int>{0});

    auto cb4 = random_codebook(5, 3, 77);
    // a query equal to row 3 exactly has zero distance
    std::vector<double> row3(cb4.z.val().begin() + 9, cb4.z.val().begin() + 12);
    CHECK(nearest_code(TD::leaf({1, 3}, row3, false), cb4.z) == std::vector<int>{3});

    auto tie = TD::leaf({1, 2}, {0.5, 0.5}, false);
    CHECK(nearest_code(tie, cb.z) == std::vector<int>{0});
}

TEST_CASE("hard_quantize_logits returns the argmax row with zero gradient") {
    auto cb = random_codebook(4, 3, 11, true);
    auto g = TD::leaf({1, 4}, {10, 0, 0, 0}, true);
    auto out = hard_quantize_logits(g, cb);
    for (int j = 0; j < 3; ++j) CHECK(out.val()[size_t(j)] == cb.z.val()[size_t(j)]);

    // all-equal logits tie to index 0
    auto tied = hard_quantize_logits(TD::zeros({1, 4}), cb);
    for (int j = 0; j < 3; ++j) CHECK(tied.val()[size_t(j)] == cb.z.val()[size_t(j)]);

    // piecewise constant: no gradient reaches g or Z
    g.zero_grad();
    cb.z.zero_grad();
    auto loss = sum_all(hard_quantize_logits(g, cb));
    backward(loss);
    for (double v : g.grad()) CHECK(v == 0.0);
    for (double v : cb.z.grad()) CHECK(v == 0.0);
}

TEST_CASE("srq_probs frozen values") {
    SRQConfig cfg;
    cfg.tau = 1.0;

    auto uniform = srq_probs(TD::zeros({1, 4}), cfg);
    for (double v : uniform.val()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

    // exp-normalize of [1,2] by hand: (1/(1+e), e/(1+e))
    auto p = srq_probs(TD::leaf({1, 2}, {1, 2}, false), cfg);
    CHECK(p.val()[0] == doctest::Approx(0.2689414).epsilon(1e-6));
    CHECK(p.val()[1] == doctest::Approx(0.7310586).epsilon(1e-6));

    cfg.tau = 1e6;
    auto flat = srq_probs(TD::leaf({1, 2}, {1, 2}, false), cfg);
    CHECK(flat.val()[0] == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(flat.val()[1] == doctest::Approx(0.5).epsilon(1e-6));

    cfg.tau = 0.0;
    CHECK_THROWS_AS(srq_probs(TD::zeros({1, 2}), cfg), Error);
    cfg.tau = -1.0;
    CHECK_THROWS_AS(srq_probs(TD::zeros({1, 2}), cfg), Error);
}

TEST_CASE("srq_probs is a probability vector across the tau range") {
    Rng rng(123, "probgrid");
    for (double tau : {1e-3, 0.01, 0.7, 1.0, 2.0, 10.0, 1e5, 1e6}) {
        SRQConfig cfg;
        cfg.tau = tau;
        for (int rep = 0; rep < 8; ++rep) {
            std::vector<double> g(6);
            for (auto& v : g) v = rng.uniform(-10.0, 10.0);
            auto p = srq_probs(TD::leaf({1, 6}, g, false), cfg);
            double sum = 0;
            for (double v : p.val()) {
                CHECK(v >= 0.0);
                sum += v;
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("srq_quantize frozen values and limits") {
    SRQConfig cfg;
    cfg.tau = 1.0;
    auto cb = random_codebook(4, 3, 21);

    // uniform logits -> column mean of Z
    auto mean = srq_quantize(TD::zeros({1, 4}), cb, cfg);
    for (int j = 0; j < 3; ++j) {
        double want = 0;
        for (int v = 0; v < 4; ++v) want += cb.z.val()[size_t(v) * 3 + j];
        want /= 4;
        CHECK(mean.val()[size_t(j)] == doctest::Approx(want).epsilon(1e-12));
    }

    // dominant logit at low tau -> that row
    cfg.tau = 0.01;
    auto sharp = srq_quantize(TD::leaf({1, 4}, {10, 0, 0, 0}, false), cb, cfg);
    for (int j = 0; j < 3; ++j)
        CHECK(std::abs(sharp.val()[size_t(j)] - cb.z.val()[size_t(j)]) < 1e-6);

    // two-point expectation by hand
    cfg.tau = 1.0;
    Codebook<double> cb01(TD::leaf({2, 1}, {0, 1}, false));
    auto w = srq_quantize(TD::leaf({1, 2}, {1, 2}, false), cb01, cfg);
    CHECK(w.val()[0] == doctest::Approx(0.7310586).epsilon(1e-6));
}

TEST_CASE("limit agreement: tau=1e-3 matches the hard lookup when margin >= 1") {
    Rng rng(321, "limit");
    SRQConfig cfg;
    cfg.tau = 1e-3;
    auto cb = random_codebook(8, 4, 31);
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<double> g(8);
        for (auto& v : g) v = rng.uniform(-3.0, 3.0);
        // enforce max-margin >= 1
        size_t arg = size_t(rng.uniform_int(0, 7));
        double mx = g[arg];
        for (size_t i = 0; i < g.size(); ++i)
            if (i != arg && g[i] > mx - 1.0) g[i] = mx - 1.0 - rng.uniform(0.0, 1.0);
        auto gl = TD::leaf({1, 8}, g, false);
        auto soft = srq_quantize(gl, cb, cfg);
        auto hard = hard_quantize_logits(gl, cb);
        for (int j = 0; j < 4; ++j)
            CHECK(std::abs(soft.val()[size_t(j)] - hard.val()[size_t(j)]) <= 1e-6);
    }
}

TEST_CASE("uniform collapse at large tau") {
    Rng rng(55, "collapse");
    SRQConfig cfg;
    cfg.tau = 1e5;
    auto cb = random_codebook(6, 3, 41);
    std::vector<double> colmean(3, 0.0);
    for (int v = 0; v < 6; ++v)
        for (int j = 0; j < 3; ++j) colmean[size_t(j)] += cb.z.val()[size_t(v) * 3 + j] / 6.0;
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> g(6);
        for (auto& v : g) v = rng.uniform(-10.0, 10.0);  // bounded logits
        auto out = srq_quantize(TD::leaf({1, 6}, g, false), cb, cfg);
        for (int j = 0; j < 3; ++j) CHECK(std::abs(out.val()[size_t(j)] - colmean[size_t(j)]) <= 1e-4);
    }
}

TEST_CASE("srq_quantize gradient matches finite differences in g and Z") {
    auto cb = random_codebook(5, 3, 61, true);
    Rng rng(71, "srq-grad");
    std::vector<TD> inputs = {detail::rnd<double>({4, 5}, rng), cb.z};
    SRQConfig cfg;
    cfg.tau = 2.0;
    auto fn = [&cfg](std::vector<TD>& ins) {
        Codebook<double> c(ins[1]);
        return srq_quantize(ins[0], c, cfg);
    };
    GradReport r = grad_check<double>(fn, inputs);
    INFO(r.error, " ", r.worst);
    CHECK(r.pass);
}

TEST_CASE("monotone sharpening: probs at the argmax do not increase with tau") {
    auto g = TD::leaf({1, 5}, {0.3, 1.9, -0.7, 0.2, 1.1}, false);
    double prev = 2.0;
    for (double tau : {1e-3, 0.01, 0.1, 0.7, 1.0, 2.0, 10.0, 100.0, 1e5}) {
        SRQConfig cfg;
        cfg.tau = tau;
        auto p = srq_probs(g, cfg);
        const double at_max = p.val()[1];
        CHECK(at_max <= prev + 1e-12);
        prev = at_max;
    }
}

TEST_CASE("ste_lookup forward is hard, backward is identity to f and zero to Z") {
    auto cb = random_codebook(6, 3, 91, true);
    Rng rng(92, "ste");
    auto f = detail::rnd<double>({4, 3}, rng);

    auto q = ste_lookup(f, cb);
    auto idx = nearest_code(f, cb.z);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 3; ++j)
            CHECK(q.val()[size_t(i) * 3 + j] == cb.z.val()[size_t(idx[size_t(i)]) * 3 + j]);

    f.zero_grad();
    cb.z.zero_grad();
    backward(sum_all(ste_lookup(f, cb)));
    for (double v : f.grad()) CHECK(v == 1.0);
    for (double v : cb.z.grad()) CHECK(v == 0.0);

    // contrast: the plain hard lookup passes nothing to f
    f.zero_grad();
    backward(sum_all(hard_lookup(f, cb)));
    for (double v : f.grad()) CHECK(v == 0.0);
}

TEST_CASE("bitwise_quantize hard values") {
    BitwiseConfig lfq{2, BitwiseMode::lfq};
    auto out = bitwise_quantize(TD::leaf({1, 2}, {0.3, -2.0}, false), lfq);
    CHECK(out.val() == std::vector<double>{1.0, -1.0});

    // sign(0) = +1
    auto zero_edge = bitwise_quantize(TD::leaf({1, 2}, {0.0, -0.5}, false), lfq);
    CHECK(zero_edge.val() == std::vector<double>{1.0, -1.0});

    BitwiseConfig bsq{2, BitwiseMode::bsq};
    auto b = bitwise_quantize(TD::leaf({1, 2}, {3.0, 4.0}, false), bsq);
    CHECK(b.val()[0] == doctest::Approx(0.7071068).epsilon(1e-6));
    CHECK(b.val()[1] == doctest::Approx(0.7071068).epsilon(1e-6));

    CHECK_THROWS_AS(bitwise_quantize(TD::zeros({1, 2}), bsq), Error);

    // codomain check over random inputs
    Rng rng(101, "lfq");
    auto f = detail::rnd<double>({8, 2}, rng, false);
    auto q = bitwise_quantize(f, lfq);
    for (double v : q.val()) CHECK((v == 1.0 || v == -1.0));
    CHECK_FALSE(q.requires_grad());
}

TEST_CASE("srq_bitwise frozen values") {
    BitwiseConfig lfq{1, BitwiseMode::lfq};
    SRQConfig cfg;
    cfg.tau = 1.0;

    // equal logits mix +-b to zero
    auto zero = srq_bitwise(TD::zeros({3, 2}), lfq, cfg);
    for (double v : zero.val()) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));

    // dominant positive at low tau saturates to +b
    SRQConfig sharp;
    sharp.tau = 0.01;
    auto sat = srq_bitwise(TD::leaf({1, 2}, {0.0, 5.0}, false), lfq, sharp);
    CHECK(std::abs(sat.val()[0] - 1.0) <= 1e-6);

    // logits (1,2) at tau=1: mix is tanh((2-1)/2) = tanh(0.5)
    auto t = srq_bitwise(TD::leaf({1, 2}, {1.0, 2.0}, false), lfq, cfg);
    CHECK(t.val()[0] == doctest::Approx(0.4621172).epsilon(1e-6));
}

TEST_CASE("srq_bitwise equals independent two-entry srq_quantize calls") {
    Rng rng(111, "bitwise-oracle");
    for (BitwiseMode mode : {BitwiseMode::lfq, BitwiseMode::bsq}) {
        BitwiseConfig bits{3, mode};
        const double b = bitwise_magnitude(bits);
        Codebook<double> two(TD::leaf({2, 1}, {-b, b}, false));
        SRQConfig cfg;
        cfg.tau = 2.0;
        for (int rep = 0; rep < 10; ++rep) {
            std::vector<double> logits(2 * 3 * 2);
            for (auto& v : logits) v = rng.uniform(-4.0, 4.0);
            auto l2 = TD::leaf({6, 2}, logits, false);
            auto joint = srq_bitwise(l2, bits, cfg);
            REQUIRE(joint.shape() == Shape{2, 3});
            for (int row = 0; row < 6; ++row) {
                auto single = srq_quantize(slice_rows(l2, row, row + 1), two, cfg);
                CHECK(joint.val()[size_t(row)] == doctest::Approx(single.val()[0]).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("gumbel noise is seeded, optional, and off by default") {
    SRQConfig plain;
    CHECK_FALSE(plain.gumbel);
    CHECK(plain.tau == 2.0);

    SRQConfig noisy;
    noisy.gumbel = true;
    noisy.seed = 42;
    auto g = TD::leaf({2, 3}, {0.1, 0.2, 0.3, -0.1, 0.0, 0.4}, false);
    auto a = srq_probs(g, noisy);
    auto b = srq_probs(g, noisy);
    CHECK(a.val() == b.val());  // same seed, same noise

    SRQConfig noisy2 = noisy;
    noisy2.seed = 43;
    auto c = srq_probs(g, noisy2);
    CHECK(a.val() != c.val());

    auto clean = srq_probs(g, plain);
    CHECK(a.val() != clean.val());
}

TEST_CASE("make_quant_logits materializes valid distributions") {
    Rng rng(131, "ql");
    SRQConfig cfg;
    auto ql = make_quant_logits(detail::rnd<double>({5, 7}, rng, false), cfg);
    REQUIRE(ql.probs.defined());
    for (int i = 0; i < 5; ++i) {
        double sum = 0;
        for (int j = 0; j < 7; ++j) {
            const double p = ql.probs.val()[size_t(i) * 7 + j];
            CHECK(p >= 0.0);
            sum += p;
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
}
