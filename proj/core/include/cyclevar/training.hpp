#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "cyclevar/generation.hpp"
#include "cyclevar/optim.hpp"
#include "cyclevar/synth.hpp"

namespace cyclevar {

// Small strided-conv patch discriminator. logits() returns a [1,p,p] map of
// per-patch scores; probabilities are sigmoid(logits).
template <class T>
struct Discriminator {
    std::vector<ConvSpec<T>> layers;

    static Discriminator make(int image_size, int base_channels, Rng& rng) {
        require(image_size >= 8 && image_size % 8 == 0,
                "Discriminator: image size must be a multiple of 8");
        Discriminator d;
        auto conv = [&](int ci, int co, int k, int stride, int pad) {
            ConvSpec<T> c;
            const double std = std::sqrt(2.0 / (double(ci) * k * k));
            c.w = Tensor<T>::randn({co, ci, k, k}, rng, T(std));
            c.b = Tensor<T>::zeros({co});
            c.stride = stride;
            c.pad = pad;
            d.layers.push_back(c);
        };
        conv(3, base_channels, 4, 2, 1);
        conv(base_channels, 2 * base_channels, 4, 2, 1);
        conv(2 * base_channels, 4 * base_channels, 4, 2, 1);
        conv(4 * base_channels, 1, 3, 1, 1);
        return d;
    }

    // frozen=true routes through detached weights so the score still
    // differentiates w.r.t. the image but never w.r.t. the discriminator
    Tensor<T> logits(const Tensor<T>& img, bool frozen = false) const {
        Tensor<T> h = img;
        for (size_t i = 0; i < layers.size(); ++i) {
            const auto& L = layers[i];
            auto w = frozen ? detach(L.w) : L.w;
            auto b = frozen ? detach(L.b) : L.b;
            h = conv2d(h, w, b, L.stride, L.pad);
            if (i + 1 < layers.size()) h = silu(h);
        }
        return h;
    }

    Tensor<T> probs(const Tensor<T>& img) const { return sigmoid(logits(img)); }

    template <class Fn>
    void visit_params(Fn&& fn) {
        for (auto& L : layers) {
            fn(L.w);
            fn(L.b);
        }
    }
    std::vector<Tensor<T>> params() {
        std::vector<Tensor<T>> out;
        visit_params([&](Tensor<T>& p) { out.push_back(p); });
        return out;
    }
    void set_trainable(bool on) {
        visit_params([&](Tensor<T>& p) { p.set_requires_grad(on); });
    }
};

// Fixed random-weight conv features standing in for a learned perceptual
// metric. Weights are frozen at construction; gradients still flow through
// to the image being scored.
template <class T>
struct PerceptualProxy {
    std::vector<ConvSpec<T>> layers;

    static PerceptualProxy make(uint64_t seed, int base_channels = 8) {
        Rng rng(seed, "perceptual-proxy");
        PerceptualProxy p;
        auto conv = [&](int ci, int co, int k, int stride, int pad) {
            ConvSpec<T> c;
            const double std = std::sqrt(2.0 / (double(ci) * k * k));
            c.w = Tensor<T>::randn({co, ci, k, k}, rng, T(std));
            c.b = Tensor<T>::zeros({co});
            c.stride = stride;
            c.pad = pad;
            c.w.set_requires_grad(false);
            c.b.set_requires_grad(false);
            p.layers.push_back(c);
        };
        conv(3, base_channels, 3, 2, 1);
        conv(base_channels, 2 * base_channels, 3, 2, 1);
        conv(2 * base_channels, 2 * base_channels, 3, 1, 1);
        return p;
    }

    Tensor<T> features(const Tensor<T>& img) const {
        Tensor<T> h = img;
        for (size_t i = 0; i < layers.size(); ++i) {
            h = layers[i].apply(h);
            if (i + 1 < layers.size()) h = silu(h);
        }
        return h;
    }
};

struct TrainWeights {
    double cyc = 1.0;
    double gan = 0.5;
    double idt = 1.0;
    double p = 0.1;
};

// One shared generator serves both directions; the domain enters only
// through the condition embedding handed to translate().
template <class T>
struct TranslatorBundle {
    Generator<T> gen;
    Discriminator<T> disc_x, disc_y;
    PerceptualProxy<T> proxy;
    TrainWeights w;
    GenerationConfig gen_cfg;

    static TranslatorBundle make(Generator<T> g, Rng& rng, int disc_base = 16,
                                 uint64_t proxy_seed = 77) {
        TranslatorBundle b;
        b.gen = std::move(g);
        b.disc_x = Discriminator<T>::make(b.gen.vae.image_size, disc_base, rng);
        b.disc_y = Discriminator<T>::make(b.gen.vae.image_size, disc_base, rng);
        b.proxy = PerceptualProxy<T>::make(proxy_seed);
        return b;
    }
};

template <class T>
struct DomainBatch {
    std::vector<Tensor<T>> x, y;
};

struct LossReport {
    int64_t step = 0;
    double cycle = 0, gan_g = 0, dis = 0, idt = 0;
    double rec_l1 = 0, rec_p = 0;
    double total_g = 0;
    double grad_norm = 0;
    double wall_ms = 0;
};

namespace detail {

// -log sigmoid(z) and -log(1 - sigmoid(z)), patch-averaged, in the stable
// softplus forms
template <class T>
Tensor<T> nlog_real(const Tensor<T>& logit_map) {
    return mean_all(softplus(mul_scalar(logit_map, T(-1))));
}
template <class T>
Tensor<T> nlog_fake(const Tensor<T>& logit_map) {
    return mean_all(softplus(logit_map));
}

template <class T>
struct ItemTerms {
    Tensor<T> cyc_x, cyc_y;          // round trips back to each source
    Tensor<T> gan_x, gan_y;          // generator-side realism of each fake
    Tensor<T> rec_l1_x, rec_l1_y;    // same-domain identity, pixel term
    Tensor<T> rec_p_x, rec_p_y;      // same-domain identity, proxy term
    Tensor<T> fake_x, fake_y;        // on-tape fakes, named by target domain
};

// every generator-side term for one unpaired item pair; flags skip the
// translates a caller does not need
template <class T>
ItemTerms<T> item_terms(const TranslatorBundle<T>& b, const Tensor<T>& xi, const Tensor<T>& yi,
                        bool want_cycle = true, bool want_gan = true, bool want_idt = true,
                        Rng* rng = nullptr) {
    ItemTerms<T> t;
    if (want_cycle || want_gan) {
        t.fake_y = translate(b.gen, xi, Domain::y, b.gen_cfg, rng);
        t.fake_x = translate(b.gen, yi, Domain::x, b.gen_cfg, rng);
    }
    if (want_cycle) {
        t.cyc_x = l1_loss(translate(b.gen, t.fake_y, Domain::x, b.gen_cfg, rng), xi);
        t.cyc_y = l1_loss(translate(b.gen, t.fake_x, Domain::y, b.gen_cfg, rng), yi);
    }
    if (want_gan) {
        t.gan_x = nlog_real(b.disc_y.logits(t.fake_y, true));
        t.gan_y = nlog_real(b.disc_x.logits(t.fake_x, true));
    }
    if (want_idt) {
        auto idt_x = translate(b.gen, xi, Domain::x, b.gen_cfg, rng);
        auto idt_y = translate(b.gen, yi, Domain::y, b.gen_cfg, rng);
        t.rec_l1_x = l1_loss(idt_x, xi);
        t.rec_l1_y = l1_loss(idt_y, yi);
        t.rec_p_x = l1_loss(b.proxy.features(idt_x), b.proxy.features(xi));
        t.rec_p_y = l1_loss(b.proxy.features(idt_y), b.proxy.features(yi));
    }
    return t;
}

template <class T>
Tensor<T> idt_term(const TranslatorBundle<T>& b, const ItemTerms<T>& t) {
    auto rec_x = add(t.rec_l1_x, mul_scalar(t.rec_p_x, T(b.w.p)));
    auto rec_y = add(t.rec_l1_y, mul_scalar(t.rec_p_y, T(b.w.p)));
    return add(rec_x, rec_y);
}

// discriminator objective for one item pair; fakes come in already detached
template <class T>
Tensor<T> disc_item(const TranslatorBundle<T>& b, const Tensor<T>& xi, const Tensor<T>& yi,
                    const Tensor<T>& fake_x, const Tensor<T>& fake_y) {
    auto lx = add(nlog_real(b.disc_x.logits(xi)), nlog_fake(b.disc_x.logits(fake_x)));
    auto ly = add(nlog_real(b.disc_y.logits(yi)), nlog_fake(b.disc_y.logits(fake_y)));
    return add(lx, ly);
}

template <class T>
void check_batch(const DomainBatch<T>& batch) {
    require(!batch.x.empty() && batch.x.size() == batch.y.size(),
            "training: batch needs equal nonzero sizes per domain");
}

}  // namespace detail

template <class T>
Tensor<T> cycle_loss(const TranslatorBundle<T>& b, const DomainBatch<T>& batch,
                     Rng* rng = nullptr) {
    detail::check_batch(batch);
    const T inv_n = T(1) / T(batch.x.size());
    Tensor<T> acc;
    for (size_t i = 0; i < batch.x.size(); ++i) {
        auto t = detail::item_terms(b, batch.x[i], batch.y[i], true, false, false, rng);
        auto term = add(t.cyc_x, t.cyc_y);
        acc = acc.defined() ? add(acc, term) : term;
    }
    return mul_scalar(acc, inv_n);
}

template <class T>
Tensor<T> gan_generator_loss(const TranslatorBundle<T>& b, const DomainBatch<T>& batch,
                             Rng* rng = nullptr) {
    detail::check_batch(batch);
    const T inv_n = T(1) / T(batch.x.size());
    Tensor<T> acc;
    for (size_t i = 0; i < batch.x.size(); ++i) {
        auto t = detail::item_terms(b, batch.x[i], batch.y[i], false, true, false, rng);
        auto term = add(t.gan_x, t.gan_y);
        acc = acc.defined() ? add(acc, term) : term;
    }
    return mul_scalar(acc, inv_n);
}

template <class T>
Tensor<T> discriminator_loss(const TranslatorBundle<T>& b, const DomainBatch<T>& batch,
                             Rng* rng = nullptr) {
    detail::check_batch(batch);
    const T inv_n = T(1) / T(batch.x.size());
    Tensor<T> acc;
    for (size_t i = 0; i < batch.x.size(); ++i) {
        Tensor<T> fake_x, fake_y;
        {
            NoGradGuard ng;
            fake_y = translate(b.gen, batch.x[i], Domain::y, b.gen_cfg, rng);
            fake_x = translate(b.gen, batch.y[i], Domain::x, b.gen_cfg, rng);
        }
        auto term = detail::disc_item(b, batch.x[i], batch.y[i], detach(fake_x), detach(fake_y));
        acc = acc.defined() ? add(acc, term) : term;
    }
    return mul_scalar(acc, inv_n);
}

template <class T>
Tensor<T> identity_loss(const TranslatorBundle<T>& b, const DomainBatch<T>& batch,
                        Rng* rng = nullptr) {
    detail::check_batch(batch);
    const T inv_n = T(1) / T(batch.x.size());
    Tensor<T> acc;
    for (size_t i = 0; i < batch.x.size(); ++i) {
        auto t = detail::item_terms(b, batch.x[i], batch.y[i], false, false, true, rng);
        auto term = detail::idt_term(b, t);
        acc = acc.defined() ? add(acc, term) : term;
    }
    return mul_scalar(acc, inv_n);
}

// the full generator objective on one batch graph; the per-item path inside
// train_step accumulates gradients of exactly this quantity
template <class T>
Tensor<T> total_generator_loss(const TranslatorBundle<T>& b, const DomainBatch<T>& batch,
                               Rng* rng = nullptr) {
    detail::check_batch(batch);
    const T inv_n = T(1) / T(batch.x.size());
    Tensor<T> acc;
    for (size_t i = 0; i < batch.x.size(); ++i) {
        auto t = detail::item_terms(b, batch.x[i], batch.y[i], true, true, true, rng);
        auto g = add(add(mul_scalar(add(t.cyc_x, t.cyc_y), T(b.w.cyc)),
                         mul_scalar(add(t.gan_x, t.gan_y), T(b.w.gan))),
                     mul_scalar(detail::idt_term(b, t), T(b.w.idt)));
        acc = acc.defined() ? add(acc, g) : g;
    }
    return mul_scalar(acc, inv_n);
}

struct OptSettings {
    double lr = 1e-4;
    int warmup = 200;
    double weight_decay = 0.01;
};

template <class T>
struct TrainState {
    AdamW<T> opt_g, opt_d;
    int64_t step = 0;
};

// Freezes the tokenizer, marks transformer + condition embeddings and both
// discriminators trainable, and builds their optimizers.
template <class T>
TrainState<T> make_train_state(TranslatorBundle<T>& b, const OptSettings& s = {}) {
    b.gen.vae.set_trainable(false);
    b.gen.cb.z.set_requires_grad(false);
    b.gen.tr.set_trainable(true);
    b.gen.cond.t_x.set_requires_grad(true);
    b.gen.cond.t_y.set_requires_grad(true);
    b.gen.cond.s.set_requires_grad(true);
    b.disc_x.set_trainable(true);
    b.disc_y.set_trainable(true);

    auto gen_params = b.gen.tr.params();
    gen_params.push_back(b.gen.cond.t_x);
    gen_params.push_back(b.gen.cond.t_y);
    gen_params.push_back(b.gen.cond.s);
    auto disc_params = b.disc_x.params();
    for (auto& p : b.disc_y.params()) disc_params.push_back(p);

    typename AdamW<T>::Config cfg;
    cfg.lr = s.lr;
    cfg.warmup_steps = s.warmup;
    cfg.weight_decay = s.weight_decay;
    return TrainState<T>{AdamW<T>(gen_params, cfg), AdamW<T>(disc_params, cfg), 0};
}

// One generator update on the weighted objective, then one discriminator
// update on detached fakes. Gradients accumulate item by item so only a
// single item graph is alive at a time.
template <class T>
LossReport train_step(TranslatorBundle<T>& b, const DomainBatch<T>& batch, TrainState<T>& state,
                      Rng* rng = nullptr) {
    detail::check_batch(batch);
    detail::WallClock clock;
    const size_t n = batch.x.size();
    const T inv_n = T(1) / T(n);

    LossReport rep;
    rep.step = state.step;

    std::vector<Tensor<T>> fakes_x, fakes_y;
    state.opt_g.zero_grad();
    for (size_t i = 0; i < n; ++i) {
        auto t = detail::item_terms(b, batch.x[i], batch.y[i], true, true, true, rng);
        auto cyc = add(t.cyc_x, t.cyc_y);
        auto gan = add(t.gan_x, t.gan_y);
        auto idt = detail::idt_term(b, t);
        auto g = add(add(mul_scalar(cyc, T(b.w.cyc)), mul_scalar(gan, T(b.w.gan))),
                     mul_scalar(idt, T(b.w.idt)));

        const double gv = double(g.val()[0]);
        if (!std::isfinite(gv))
            throw Error("train_step: nonfinite generator loss at step " +
                        std::to_string(state.step) + " item " + std::to_string(i) +
                        " (cycle=" + std::to_string(double(cyc.val()[0])) +
                        ", gan=" + std::to_string(double(gan.val()[0])) +
                        ", idt=" + std::to_string(double(idt.val()[0])) + ")");

        rep.cycle += double(cyc.val()[0]) / double(n);
        rep.gan_g += double(gan.val()[0]) / double(n);
        rep.idt += double(idt.val()[0]) / double(n);
        rep.rec_l1 += double(add(t.rec_l1_x, t.rec_l1_y).val()[0]) / double(n);
        rep.rec_p += double(add(t.rec_p_x, t.rec_p_y).val()[0]) / double(n);
        rep.total_g += gv / double(n);

        backward(mul_scalar(g, inv_n));
        fakes_x.push_back(Tensor<T>::leaf(t.fake_x.shape(), t.fake_x.val()));
        fakes_y.push_back(Tensor<T>::leaf(t.fake_y.shape(), t.fake_y.val()));
    }
    rep.grad_norm = state.opt_g.grad_norm();
    state.opt_g.step();

    state.opt_d.zero_grad();
    for (size_t i = 0; i < n; ++i) {
        auto d = detail::disc_item(b, batch.x[i], batch.y[i], fakes_x[i], fakes_y[i]);
        const double dv = double(d.val()[0]);
        if (!std::isfinite(dv))
            throw Error("train_step: nonfinite discriminator loss at step " +
                        std::to_string(state.step) + " item " + std::to_string(i));
        rep.dis += dv / double(n);
        backward(mul_scalar(d, inv_n));
    }
    state.opt_d.step();

    state.step += 1;
    rep.wall_ms = clock.ms();
    return rep;
}

struct TrainConfig {
    int steps = 2000;
    int batch = 4;
    OptSettings opt;
    uint64_t data_offset = 0;   // starting synthetic index
    int log_every = 0;
    std::ostream* metrics = nullptr;   // CSV sink, header + one row per step
};

struct TrainRunReport {
    bool ok = true;
    std::string error;
    int steps_run = 0;
    LossReport last;
    std::vector<double> cycle_history;
};

// Unpaired: the two domains draw from disjoint synthetic index ranges so no
// geometry ever lines up across a batch pair.
template <class T>
DomainBatch<T> synth_batch(const SyntheticDomainSpec& spec, int n, uint64_t start_index) {
    DomainBatch<T> batch;
    for (int i = 0; i < n; ++i) {
        batch.x.push_back(synth_image<T>(spec, Domain::x, start_index + uint64_t(i)).image);
        batch.y.push_back(
            synth_image<T>(spec, Domain::y, (uint64_t(1) << 40) + start_index + uint64_t(i))
                .image);
    }
    return batch;
}

template <class T>
TrainRunReport run_training(TranslatorBundle<T>& b, TrainState<T>& state,
                            const SyntheticDomainSpec& spec, const TrainConfig& cfg) {
    TrainRunReport rep;
    if (cfg.metrics) *cfg.metrics << "step,cycle,gan_g,dis,idt,grad_norm,wall_ms\n";
    for (int s = 0; s < cfg.steps; ++s) {
        auto batch = synth_batch<T>(spec, cfg.batch,
                                    cfg.data_offset + uint64_t(s) * uint64_t(cfg.batch));
        LossReport lr;
        try {
            lr = train_step(b, batch, state);
        } catch (const Error& e) {
            rep.ok = false;
            rep.error = e.what();
            return rep;
        }
        rep.last = lr;
        rep.cycle_history.push_back(lr.cycle);
        rep.steps_run += 1;
        if (cfg.metrics)
            *cfg.metrics << lr.step << ',' << lr.cycle << ',' << lr.gan_g << ',' << lr.dis << ','
                         << lr.idt << ',' << lr.grad_norm << ',' << lr.wall_ms << '\n';
        if (cfg.log_every > 0 && (s % cfg.log_every == 0 || s + 1 == cfg.steps))
            std::printf("step %5d  cycle %.4f  gan_g %.4f  dis %.4f  idt %.4f\n", s, lr.cycle,
                        lr.gan_g, lr.dis, lr.idt);
    }
    return rep;
}

}  // namespace cyclevar
