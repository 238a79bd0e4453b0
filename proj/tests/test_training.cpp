#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "cyclevar/gradcheck.hpp"
#include "cyclevar/training.hpp"

using namespace cyclevar;

using TD = Tensor<double>;

namespace {

constexpr double kLn2 = 0.6931471805599453;

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

template <class T>
void liven_gates(Transformer<T>& tr, uint64_t seed) {
    Rng rng(seed, "liven");
    for (auto& blk : tr.blocks) {
        blk.mod_w = Tensor<T>::randn(blk.mod_w.shape(), rng, 0.05);
        blk.mod_b = Tensor<T>::randn(blk.mod_b.shape(), rng, 0.05);
    }
}

template <class T>
TranslatorBundle<T> tiny_bundle(uint64_t seed, bool liven = true) {
    Rng rng(seed, "tiny-bundle");
    auto bundle = TranslatorBundle<T>::make(tiny_generator<T>(seed), rng, 4, seed + 1);
    if (liven) liven_gates(bundle.gen.tr, seed + 2);
    return bundle;
}

template <class T>
DomainBatch<T> tiny_batch(int n, uint64_t start = 0) {
    SyntheticDomainSpec spec;
    spec.image_size = 8;
    return synth_batch<T>(spec, n, start);
}

template <class T>
void zero_disc(Discriminator<T>& d) {
    for (auto& L : d.layers) {
        std::fill(L.w.val().begin(), L.w.val().end(), T(0));
        std::fill(L.b.val().begin(), L.b.val().end(), T(0));
    }
}

template <class T>
double grad_peak(const Tensor<T>& p) {
    double m = 0;
    for (T v : p.grad()) m = std::max(m, std::fabs(double(v)));
    return m;
}

}  // namespace

TEST_CASE("discriminator emits patch probabilities and rejects bad sizes") {
    Rng rng(501, "disc");
    auto d32 = Discriminator<double>::make(32, 8, rng);
    auto img = TD::randn({3, 32, 32}, rng, 1.0);
    auto z = d32.logits(img);
    CHECK(z.shape() == Shape{1, 4, 4});
    auto p = d32.probs(img);
    for (double v : p.val()) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
    auto p2 = d32.probs(img);
    CHECK(p2.val() == p.val());

    auto d8 = Discriminator<double>::make(8, 4, rng);
    CHECK(d8.logits(TD::randn({3, 8, 8}, rng, 1.0)).shape() == Shape{1, 1, 1});
    CHECK_THROWS_AS((void)Discriminator<double>::make(12, 4, rng), Error);
}

TEST_CASE("frozen discriminator weights still score differentiably") {
    Rng rng(503, "disc-frozen");
    auto d = Discriminator<double>::make(8, 4, rng);
    d.set_trainable(true);
    auto img = TD::randn({3, 8, 8}, rng, 0.5);
    img.set_requires_grad(true);

    auto loss = mean_all(d.logits(img, true));
    backward(loss);
    CHECK(grad_peak(img) > 0.0);
    for (auto& p : d.params()) CHECK(grad_peak(p) == 0.0);
}

TEST_CASE("perceptual proxy is fixed, seeded, and zero on identical inputs") {
    auto pa = PerceptualProxy<double>::make(42);
    auto pb = PerceptualProxy<double>::make(42);
    Rng rng(505, "proxy");
    auto img = TD::randn({3, 8, 8}, rng, 0.5);
    CHECK(pa.features(img).val() == pb.features(img).val());

    auto self = l1_loss(pa.features(img), pa.features(img));
    CHECK(self.val()[0] == 0.0);

    for (auto& L : pa.layers) {
        CHECK_FALSE(L.w.requires_grad());
        CHECK_FALSE(L.b.requires_grad());
    }

    img.set_requires_grad(true);
    auto other = TD::randn({3, 8, 8}, rng, 0.5);
    backward(l1_loss(pa.features(img), pa.features(other)));
    CHECK(grad_peak(img) > 0.0);
}

TEST_CASE("indifferent discriminators pin both gan losses to their log-2 values") {
    auto b = tiny_bundle<double>(601);
    zero_disc(b.disc_x);
    zero_disc(b.disc_y);
    auto batch = tiny_batch<double>(2);

    auto g = gan_generator_loss(b, batch);
    CHECK(g.val()[0] == doctest::Approx(2 * kLn2).epsilon(1e-12));
    auto d = discriminator_loss(b, batch);
    CHECK(d.val()[0] == doctest::Approx(4 * kLn2).epsilon(1e-12));
}

TEST_CASE("generator gan loss falls as the discriminator scores fakes higher") {
    auto score_at = [&](double bias) {
        auto b = tiny_bundle<double>(603);
        zero_disc(b.disc_x);
        zero_disc(b.disc_y);
        b.disc_x.layers.back().b.val()[0] = bias;
        b.disc_y.layers.back().b.val()[0] = bias;
        return gan_generator_loss(b, tiny_batch<double>(1)).val()[0];
    };
    const double lo = score_at(-1.0), mid = score_at(0.0), hi = score_at(1.0);
    CHECK(lo > mid);
    CHECK(mid > hi);
    CHECK(score_at(40.0) < 1e-10);
}

TEST_CASE("cycle loss is invariant under swapping domain roles") {
    auto b = tiny_bundle<double>(607);
    auto batch = tiny_batch<double>(2);

    auto swapped = b;
    std::swap(swapped.gen.cond.t_x, swapped.gen.cond.t_y);
    DomainBatch<double> rev{batch.y, batch.x};

    auto a = cycle_loss(b, batch);
    auto c = cycle_loss(swapped, rev);
    CHECK(a.val()[0] == c.val()[0]);
    CHECK(a.val()[0] > 0.0);
    CHECK(std::isfinite(a.val()[0]));
}

TEST_CASE("a=0 reduces the cycle to two tokenizer round trips") {
    auto b = tiny_bundle<double>(611);
    b.gen_cfg.a = 0.0;
    auto batch = tiny_batch<double>(1);

    auto roundtrip2 = [&](const TD& img) {
        NoGradGuard ng;
        auto once = reconstruct_image(
            b.gen.vae, tokenize_multiscale(b.gen.vae.encode(img), b.gen.cb, b.gen.sched),
            b.gen.sched);
        auto twice = reconstruct_image(
            b.gen.vae, tokenize_multiscale(b.gen.vae.encode(once), b.gen.cb, b.gen.sched),
            b.gen.sched);
        return l1_loss(twice, img).val()[0];
    };
    const double want = roundtrip2(batch.x[0]) + roundtrip2(batch.y[0]);
    CHECK(cycle_loss(b, batch).val()[0] == want);
}

TEST_CASE("loss separation: gan terms never cross into the other player") {
    auto b = tiny_bundle<double>(613);
    b.gen.tr.set_trainable(true);
    b.gen.cond.t_x.set_requires_grad(true);
    b.gen.cond.t_y.set_requires_grad(true);
    b.disc_x.set_trainable(true);
    b.disc_y.set_trainable(true);
    auto batch = tiny_batch<double>(1);

    backward(gan_generator_loss(b, batch));
    CHECK(grad_peak(b.gen.tr.head_w) > 0.0);
    for (auto& p : b.disc_x.params()) CHECK(grad_peak(p) == 0.0);
    for (auto& p : b.disc_y.params()) CHECK(grad_peak(p) == 0.0);

    for (auto& p : b.gen.tr.params()) p.zero_grad();
    b.gen.cond.t_x.zero_grad();
    b.gen.cond.t_y.zero_grad();

    backward(discriminator_loss(b, batch));
    bool disc_live = false;
    for (auto& p : b.disc_x.params()) disc_live = disc_live || grad_peak(p) > 0.0;
    CHECK(disc_live);
    for (auto& p : b.gen.tr.params()) CHECK(grad_peak(p) == 0.0);
    CHECK(grad_peak(b.gen.cond.t_x) == 0.0);
    CHECK(grad_peak(b.gen.cond.t_y) == 0.0);
}

TEST_CASE("identity loss is nonnegative and zero perceptual term on self") {
    auto b = tiny_bundle<double>(617);
    auto batch = tiny_batch<double>(2);
    auto v = identity_loss(b, batch).val()[0];
    CHECK(v > 0.0);
    CHECK(std::isfinite(v));
}

TEST_CASE("total objective is the declared weighted sum") {
    auto b = tiny_bundle<double>(619);
    b.w.cyc = 0.7;
    b.w.gan = 0.3;
    b.w.idt = 1.3;
    auto batch = tiny_batch<double>(1);

    const double total = total_generator_loss(b, batch).val()[0];
    const double parts = 0.7 * cycle_loss(b, batch).val()[0] +
                         0.3 * gan_generator_loss(b, batch).val()[0] +
                         1.3 * identity_loss(b, batch).val()[0];
    CHECK(total == doctest::Approx(parts).epsilon(1e-12));
}

TEST_CASE("hard argmax quantization starves the classifier head of gradient") {
    auto b = tiny_bundle<double>(621);
    b.gen.tr.set_trainable(true);
    auto batch = tiny_batch<double>(1);

    backward(total_generator_loss(b, batch));
    CHECK(grad_peak(b.gen.tr.head_w) > 0.0);

    for (auto& p : b.gen.tr.params()) p.zero_grad();
    b.gen_cfg.hard = true;
    backward(total_generator_loss(b, batch));
    for (double v : b.gen.tr.head_w.grad()) CHECK(v == 0.0);
    for (double v : b.gen.tr.head_b.grad()) CHECK(v == 0.0);
}

TEST_CASE("train_step updates both players and honors the frozen tokenizer") {
    auto b = tiny_bundle<double>(623);
    auto state = make_train_state(b, {1e-3, 0, 0.0});
    auto batch = tiny_batch<double>(2);

    auto vae_w = b.gen.vae.enc[0].w.val();
    auto cb_z = b.gen.cb.z.val();
    auto head_before = b.gen.tr.head_w.val();
    auto disc_before = b.disc_x.layers[0].w.val();

    auto rep = train_step(b, batch, state);
    CHECK(rep.step == 0);
    CHECK(state.step == 1);
    for (double v : {rep.cycle, rep.gan_g, rep.dis, rep.idt, rep.total_g, rep.grad_norm}) {
        CHECK(std::isfinite(v));
        CHECK(v > 0.0);
    }
    CHECK(rep.wall_ms >= 0.0);
    CHECK(rep.total_g == doctest::Approx(b.w.cyc * rep.cycle + b.w.gan * rep.gan_g +
                                         b.w.idt * rep.idt)
                             .epsilon(1e-12));

    CHECK(b.gen.tr.head_w.val() != head_before);
    CHECK(b.disc_x.layers[0].w.val() != disc_before);
    CHECK(b.gen.vae.enc[0].w.val() == vae_w);
    CHECK(b.gen.cb.z.val() == cb_z);

    (void)train_step(b, batch, state);
    CHECK(b.gen.vae.enc[0].w.val() == vae_w);
    CHECK(b.gen.cb.z.val() == cb_z);
}

TEST_CASE("zero learning rate leaves parameters untouched but reports losses") {
    auto b = tiny_bundle<double>(627);
    auto state = make_train_state(b, {0.0, 0, 0.0});
    auto head_before = b.gen.tr.head_w.val();
    auto disc_before = b.disc_y.layers[0].w.val();

    auto rep = train_step(b, tiny_batch<double>(1), state);
    CHECK(rep.total_g > 0.0);
    CHECK(b.gen.tr.head_w.val() == head_before);
    CHECK(b.disc_y.layers[0].w.val() == disc_before);
}

TEST_CASE("every trainable generator tensor sees gradient on a generic batch") {
    auto b = tiny_bundle<double>(629);
    // serial decoding exercises the full parameter set; the start embedding
    // only enters the graph through the serial start slot
    b.gen_cfg.mode = GenerationConfig::Mode::serial;
    auto state = make_train_state(b, {1e-4, 0, 0.0});
    (void)train_step(b, tiny_batch<double>(1), state);

    int idx = 0;
    b.gen.tr.visit_params([&](Tensor<double>& p) {
        INFO("transformer param ", idx);
        CHECK(grad_peak(p) > 0.0);
        ++idx;
    });
    CHECK(grad_peak(b.gen.cond.t_x) > 0.0);
    CHECK(grad_peak(b.gen.cond.t_y) > 0.0);
    CHECK(grad_peak(b.gen.cond.s) > 0.0);
}

TEST_CASE("nonfinite inputs abort the step with a diagnostic") {
    auto b = tiny_bundle<double>(631);
    auto state = make_train_state(b);
    auto batch = tiny_batch<double>(1);
    batch.x[0].val()[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH_AS((void)train_step(b, batch, state), doctest::Contains("nonfinite"),
                         Error);
}

TEST_CASE("tiny total objective passes finite differences") {
    auto b = tiny_bundle<double>(633);
    b.gen.tr.set_trainable(true);
    b.gen.cond.t_x.set_requires_grad(true);
    b.gen.cond.t_y.set_requires_grad(true);
    b.gen.cond.s.set_requires_grad(true);
    auto batch = tiny_batch<double>(1);

    GradCheckConfig gc;
    gc.rel_tol = 1e-4;
    // loss scale is O(1); the floor absorbs fd kink noise from the L1 terms
    // on coordinates whose true gradient is ~1e-7
    gc.abs_tol = 1e-6;
    gc.max_coords_per_input = 3;
    std::vector<TD> inputs{b.gen.tr.head_w, b.gen.tr.blocks[0].wq, b.gen.tr.blocks[1].mod_w,
                           b.gen.cond.t_x, b.gen.cond.s};
    auto rep = grad_check<double>(
        [&](const std::vector<TD>&) { return total_generator_loss(b, batch); }, inputs, gc);
    INFO(rep.error, " worst=", rep.worst, " rel=", rep.max_rel);
    CHECK(rep.pass);
}

TEST_CASE("run_training emits csv metrics and an unpaired stream") {
    auto b = tiny_bundle<double>(637);
    auto state = make_train_state(b, {1e-4, 2, 0.01});
    SyntheticDomainSpec spec;
    spec.image_size = 8;

    std::ostringstream csv;
    TrainConfig cfg;
    cfg.steps = 3;
    cfg.batch = 1;
    cfg.metrics = &csv;
    auto rep = run_training(b, state, spec, cfg);
    REQUIRE(rep.ok);
    CHECK(rep.steps_run == 3);
    CHECK(rep.cycle_history.size() == 3);
    CHECK(std::isfinite(rep.last.total_g));

    std::istringstream lines(csv.str());
    std::string line;
    std::getline(lines, line);
    CHECK(line == "step,cycle,gan_g,dis,idt,grad_norm,wall_ms");
    int rows = 0;
    while (std::getline(lines, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 3);

    // same index in the two domains would share geometry; the stream offsets
    // them so batch pairs never line up
    auto batch = tiny_batch<double>(1, 5);
    double diff = 0;
    for (size_t i = 0; i < batch.x[0].val().size(); ++i)
        diff = std::max(diff, std::fabs(batch.x[0].val()[i] - batch.y[0].val()[i]));
    CHECK(diff > 0.05);
}
