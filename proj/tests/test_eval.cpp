#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cyclevar/eval.hpp"

using namespace cyclevar;

using TD = Tensor<double>;

namespace {

template <class T>
Generator<T> tiny_generator(uint64_t seed) {
    Rng rng(seed, "tiny-gen");
    Generator<T> g;
    g.vae = Vae<T>::make(8, 2, 4, 8, rng);
    g.cb = Codebook<T>::random(8, 4, rng, 0.6);
    g.sched = ScaleSchedule::pow2_square(2);
    TransformerConfig cfg;
    cfg.width = 16;
    cfg.heads = 2;
    cfg.blocks = 2;
    cfg.token_dim = 4;
    cfg.vocab = 8;
    cfg.scales = {{1, 1}, {2, 2}};
    g.tr = Transformer<T>::make(cfg, rng);
    g.cond = ConditionEmbedding<T>::make(cfg.width, cfg.token_dim, rng);
    return g;
}

std::vector<TD> synth_images(int n, Domain dom, uint64_t start, int size = 8) {
    SyntheticDomainSpec spec;
    spec.image_size = size;
    std::vector<TD> out;
    for (int i = 0; i < n; ++i)
        out.push_back(synth_image<double>(spec, dom, start + uint64_t(i)).image);
    return out;
}

}  // namespace

TEST_CASE("jacobi eigensolver reproduces a known spectrum") {
    // A = Q diag(9,4,1) Q^T with Q a Givens rotation mix
    std::vector<double> a{6.0, 2.0, 1.0, 2.0, 5.0, 2.0, 1.0, 2.0, 3.0};
    std::vector<double> vecs;
    auto evals = detail::sym_eig(a, 3, &vecs);

    // residual check: A v = lambda v for each eigenpair
    for (int j = 0; j < 3; ++j) {
        for (int i = 0; i < 3; ++i) {
            double av = 0;
            for (int k = 0; k < 3; ++k) av += a[size_t(i) * 3 + k] * vecs[size_t(k) * 3 + j];
            CHECK(av == doctest::Approx(evals[size_t(j)] * vecs[size_t(i) * 3 + j]).epsilon(1e-9));
        }
    }
    double trace = 0, sum = 0;
    for (int i = 0; i < 3; ++i) {
        trace += a[size_t(i) * 3 + i];
        sum += evals[size_t(i)];
    }
    CHECK(sum == doctest::Approx(trace).epsilon(1e-12));
}

TEST_CASE("matrix square root squares back") {
    std::vector<double> m{4.0, 1.0, 1.0, 3.0};
    auto r = detail::sym_sqrt(m, 2);
    auto rr = detail::mat_mul(r, r, 2);
    for (int i = 0; i < 4; ++i) CHECK(rr[size_t(i)] == doctest::Approx(m[size_t(i)]).epsilon(1e-10));
}

TEST_CASE("fid oracle: identical sets vanish, shifted gaussians recover the shift") {
    Rng rng(701, "fid");
    const int n = 1000, d = 6;
    std::vector<double> a(size_t(n) * d), b(size_t(n) * d);
    std::vector<double> shift{0.8, -0.5, 0.3, 0.0, 1.1, -0.2};
    double m2 = 0;
    for (double s : shift) m2 += s * s;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
            a[size_t(i) * d + j] = rng.normal();
            b[size_t(i) * d + j] = rng.normal() + shift[size_t(j)];
        }

    CHECK(fid_from_features(a, a, d) <= 1e-6);
    const double got = fid_from_features(a, b, d);
    CHECK(got == doctest::Approx(m2).epsilon(0.05));
    CHECK(got >= 0.0);

    const double fwd = fid_from_features(a, b, d), rev = fid_from_features(b, a, d);
    CHECK(std::fabs(fwd - rev) <= 1e-6);

    CHECK_THROWS_AS((void)fid_from_features(std::vector<double>(size_t(d)), b, d), Error);
}

TEST_CASE("fid_proxy on images: self distance vanishes, domains separate") {
    auto px = PerceptualProxy<double>::make(901);
    auto xs = synth_images(8, Domain::x, 0);
    auto ys = synth_images(8, Domain::y, 0);

    CHECK(fid_proxy(px, xs, xs) <= 1e-6);
    CHECK(fid_proxy(px, xs, ys) > fid_proxy(px, xs, xs));
    CHECK_THROWS_AS((void)fid_proxy(px, {xs[0]}, ys), Error);
}

TEST_CASE("struct_dist: exact zero on self, bounded, hue-shift stable") {
    auto px = PerceptualProxy<double>::make(903);
    auto xs = synth_images(4, Domain::x, 10);
    auto ys = synth_images(4, Domain::y, 10);   // same geometry, other palette
    auto zs = synth_images(4, Domain::y, 900);  // unrelated geometry

    CHECK(struct_dist(px, xs[0], xs[0]) == 0.0);

    for (int i = 0; i < 4; ++i) {
        const double d = struct_dist(px, xs[size_t(i)], zs[size_t(i)]);
        CHECK(d >= 0.0);
        CHECK(d <= 2.0);
    }

    // identical geometry under the other palette stays much closer than
    // unrelated geometry
    double same_geo = 0, diff_geo = 0;
    for (int i = 0; i < 4; ++i) {
        same_geo += struct_dist(px, xs[size_t(i)], ys[size_t(i)]) / 4;
        diff_geo += struct_dist(px, xs[size_t(i)], zs[size_t(i)]) / 4;
    }
    CHECK(same_geo < diff_geo);
    CHECK(same_geo <= 0.05);
}

TEST_CASE("domain classifier hits the pretraining gate") {
    SyntheticDomainSpec spec;
    spec.image_size = 8;
    ClassifierTrainConfig cfg;
    cfg.steps = 120;
    cfg.batch = 16;
    auto rep = train_domain_classifier<double>(spec, cfg);
    std::printf("domain classifier holdout acc: %.4f\n", rep.holdout_acc);
    CHECK(rep.holdout_acc >= 0.99);

    auto ys = synth_images(32, Domain::y, uint64_t(3) << 33);
    auto xs = synth_images(32, Domain::x, uint64_t(3) << 33);
    CHECK(domain_acc(rep.clf, ys, Domain::y) >= 0.99);
    CHECK(domain_acc(rep.clf, xs, Domain::y) <= 0.01);
}

TEST_CASE("bench_modes: exact forward counts and sane statistics") {
    auto gen = tiny_generator<double>(905);
    SyntheticDomainSpec spec;
    spec.image_size = 8;
    auto img = synth_image<double>(spec, Domain::x, 4).image;

    BenchConfig cfg;
    cfg.repeats = 4;
    cfg.warmup = 1;
    auto pair = bench_modes(gen, img, cfg);

    CHECK(pair.serial.mode == "serial");
    CHECK(pair.parallel.mode == "parallel");
    CHECK(pair.serial.K == 2);
    CHECK(pair.serial.forwards == 2);
    CHECK(pair.parallel.forwards == 1);
    CHECK(pair.serial.mean_s >= 0.0);
    CHECK(pair.serial.std_s >= 0.0);
    CHECK(pair.parallel.std_s >= 0.0);

    auto j = to_json(pair.parallel);
    CHECK(j["mode"] == "parallel");
    CHECK(j["forwards"] == 1);
    CHECK(bench_csv_header() == "mode,K,mean_s,std_s,forwards");
    auto row = bench_csv_row(pair.serial);
    CHECK(row.substr(0, 9) == "serial,2,");

    MetricReport mr{0.5, 0.1, 0.9, 16};
    auto mj = to_json(mr);
    CHECK(mj["fid_proxy"] == 0.5);
    CHECK(mj["n_images"] == 16);
}
