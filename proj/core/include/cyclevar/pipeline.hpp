#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "cyclevar/checkpoint.hpp"
#include "cyclevar/config.hpp"
#include "cyclevar/training.hpp"

namespace cyclevar {

// ---------------------------------------------------------------------------
// model construction from a RunConfig

inline GenerationConfig generation_config(const RunConfig& cfg) {
    GenerationConfig gc;
    gc.mode = cfg.mode == "serial" ? GenerationConfig::Mode::serial
                                   : GenerationConfig::Mode::parallel;
    gc.a = cfg.fusion_a;
    gc.srq.tau = cfg.tau;
    gc.srq.gumbel = cfg.gumbel;
    gc.hard = cfg.hard;
    gc.drop_ms_output = cfg.drop_ms_output;
    gc.drop_ms_context = cfg.drop_ms_context;
    gc.bitwise.d = cfg.bitwise_d;
    return gc;
}

inline TransformerConfig transformer_config(const RunConfig& cfg, const ScaleSchedule& sched) {
    TransformerConfig tc;
    tc.width = cfg.width;
    tc.heads = cfg.heads;
    tc.blocks = cfg.blocks;
    tc.mlp_ratio = cfg.mlp_ratio;
    tc.token_dim = cfg.latent_channels;
    tc.vocab = cfg.vocab;
    tc.bitwise = cfg.bitwise;
    tc.bitwise_d = cfg.bitwise_d;
    tc.scales = sched.sizes;
    return tc;
}

template <class T>
Generator<T> make_generator(const RunConfig& cfg, Rng& rng) {
    config_validate(cfg);
    Generator<T> g;
    g.vae = Vae<T>::make(cfg.image_size, cfg.latent_size, cfg.latent_channels, cfg.vae_base, rng);
    g.cb = Codebook<T>::random(cfg.vocab, cfg.latent_channels, rng);
    g.sched = ScaleSchedule::pow2_square(cfg.latent_size);
    g.tr = Transformer<T>::make(transformer_config(cfg, g.sched), rng);
    g.cond = ConditionEmbedding<T>::make(cfg.width, cfg.latent_channels, rng);
    return g;
}

template <class T>
Generator<T> make_generator(const RunConfig& cfg) {
    Rng rng(cfg.seed, "init");
    return make_generator<T>(cfg, rng);
}

// The proxy seed stays fixed across run seeds on purpose: it is a measurement
// instrument, and scores are only comparable when every run shares it.
template <class T>
TranslatorBundle<T> make_bundle(const RunConfig& cfg) {
    Rng rng(cfg.seed, "init");
    auto g = make_generator<T>(cfg, rng);
    auto b = TranslatorBundle<T>::make(std::move(g), rng, cfg.disc_base);
    b.w.cyc = cfg.w_cyc;
    b.w.gan = cfg.w_gan;
    b.w.idt = cfg.w_idt;
    b.w.p = cfg.w_p;
    b.gen_cfg = generation_config(cfg);
    return b;
}

// ---------------------------------------------------------------------------
// named parameter walks; the order here is the checkpoint blob order

template <class T, class Fn>
void named_conv_walk(std::vector<ConvSpec<T>>& layers, const std::string& prefix, Fn&& fn) {
    for (size_t i = 0; i < layers.size(); ++i) {
        fn(prefix + std::to_string(i) + ".w", layers[i].w);
        fn(prefix + std::to_string(i) + ".b", layers[i].b);
    }
}

template <class T, class Fn>
void for_each_named_param(Vae<T>& v, Codebook<T>& cb, Fn&& fn) {
    named_conv_walk(v.enc, "vae.enc", fn);
    named_conv_walk(v.dec, "vae.dec", fn);
    fn("cb.z", cb.z);
}

template <class T, class Fn>
void for_each_named_param(Generator<T>& g, Fn&& fn) {
    for_each_named_param(g.vae, g.cb, fn);
    fn("tr.in_w", g.tr.in_w);
    fn("tr.in_b", g.tr.in_b);
    for (size_t k = 0; k < g.tr.pos.size(); ++k)
        fn("tr.pos" + std::to_string(k), g.tr.pos[k]);
    fn("tr.scale_emb", g.tr.scale_emb);
    for (size_t i = 0; i < g.tr.blocks.size(); ++i) {
        auto& b = g.tr.blocks[i];
        const std::string p = "tr.blk" + std::to_string(i) + ".";
        fn(p + "wq", b.wq); fn(p + "bq", b.bq);
        fn(p + "wk", b.wk); fn(p + "bk", b.bk);
        fn(p + "wv", b.wv); fn(p + "bv", b.bv);
        fn(p + "wo", b.wo); fn(p + "bo", b.bo);
        fn(p + "w1", b.w1); fn(p + "b1", b.b1);
        fn(p + "w2", b.w2); fn(p + "b2", b.b2);
        fn(p + "mod_w", b.mod_w); fn(p + "mod_b", b.mod_b);
    }
    fn("tr.head_w", g.tr.head_w);
    fn("tr.head_b", g.tr.head_b);
    fn("cond.t_x", g.cond.t_x);
    fn("cond.t_y", g.cond.t_y);
    fn("cond.s", g.cond.s);
}

template <class T, class Fn>
void for_each_named_param(TranslatorBundle<T>& b, Fn&& fn) {
    for_each_named_param(b.gen, fn);
    named_conv_walk(b.disc_x.layers, "disc_x.l", fn);
    named_conv_walk(b.disc_y.layers, "disc_y.l", fn);
    named_conv_walk(b.proxy.layers, "proxy.l", fn);
}

// ---------------------------------------------------------------------------
// checkpoint bridging

namespace detail {

template <class T>
TensorRecord record_of(const std::string& name, const Tensor<T>& t) {
    TensorRecord rec;
    rec.name = name;
    for (int d : t.shape()) rec.shape.push_back(size_t(d));
    rec.data.reserve(t.val().size());
    for (T v : t.val()) rec.data.push_back(float(v));
    return rec;
}

template <class T, class WalkFn>
CheckpointData snapshot_walk(const RunConfig& cfg, WalkFn&& walk) {
    CheckpointData ck;
    ck.config = config_dump(cfg);
    walk([&](const std::string& name, Tensor<T>& t) { ck.tensors.push_back(record_of(name, t)); });
    return ck;
}

// Writes checkpoint values into the walked tensors in place, preserving the
// handles. Every walked tensor must be covered; leftover records are an error
// unless allow_extra (a full-bundle file feeding a generator-only walk).
template <class T, class WalkFn>
void restore_walk(const CheckpointData& ck, bool allow_extra, WalkFn&& walk) {
    std::unordered_map<std::string, const TensorRecord*> by_name;
    for (const auto& rec : ck.tensors)
        if (!by_name.emplace(rec.name, &rec).second)
            throw Error("checkpoint: duplicate tensor '" + rec.name + "'");
    size_t used = 0;
    walk([&](const std::string& name, Tensor<T>& t) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw Error("checkpoint: missing tensor '" + name + "'");
        const TensorRecord& rec = *it->second;
        const Shape& s = t.shape();
        bool same = rec.shape.size() == s.size();
        for (size_t i = 0; same && i < s.size(); ++i) same = rec.shape[i] == size_t(s[i]);
        if (!same)
            throw Error("checkpoint: tensor '" + name + "' stored with a different shape");
        auto& vals = t.val();
        for (size_t i = 0; i < vals.size(); ++i) vals[i] = T(rec.data[i]);
        ++used;
    });
    if (!allow_extra && used != ck.tensors.size())
        throw Error("checkpoint: file carries " + std::to_string(ck.tensors.size()) +
                    " tensors but the model consumed " + std::to_string(used));
}

}  // namespace detail

inline RunConfig checkpoint_config(const CheckpointData& ck) {
    RunConfig cfg;
    for (const auto& line : ck.config) {
        size_t eq = line.find('=');
        if (eq == std::string::npos) throw Error("checkpoint: malformed config line '" + line + "'");
        config_apply(cfg, line.substr(0, eq), line.substr(eq + 1));
    }
    return cfg;
}

template <class T>
CheckpointData tokenizer_checkpoint(Vae<T>& vae, Codebook<T>& cb, const RunConfig& cfg) {
    return detail::snapshot_walk<T>(
        cfg, [&](auto&& fn) { for_each_named_param(vae, cb, fn); });
}

template <class T>
void restore_tokenizer(Vae<T>& vae, Codebook<T>& cb, const CheckpointData& ck,
                       bool allow_extra = false) {
    detail::restore_walk<T>(ck, allow_extra,
                            [&](auto&& fn) { for_each_named_param(vae, cb, fn); });
}

template <class T>
CheckpointData generator_checkpoint(Generator<T>& g, const RunConfig& cfg) {
    return detail::snapshot_walk<T>(cfg, [&](auto&& fn) { for_each_named_param(g, fn); });
}

template <class T>
void restore_generator(Generator<T>& g, const CheckpointData& ck, bool allow_extra = false) {
    detail::restore_walk<T>(ck, allow_extra, [&](auto&& fn) { for_each_named_param(g, fn); });
}

template <class T>
CheckpointData bundle_checkpoint(TranslatorBundle<T>& b, const RunConfig& cfg) {
    return detail::snapshot_walk<T>(cfg, [&](auto&& fn) { for_each_named_param(b, fn); });
}

template <class T>
void restore_bundle(TranslatorBundle<T>& b, const CheckpointData& ck) {
    detail::restore_walk<T>(ck, false, [&](auto&& fn) { for_each_named_param(b, fn); });
}

// Rebuilds a generator from the config stored in a checkpoint. Works with
// both generator and full-bundle files.
template <class T>
Generator<T> generator_from_checkpoint(const CheckpointData& ck, RunConfig* cfg_out = nullptr) {
    RunConfig cfg = checkpoint_config(ck);
    auto g = make_generator<T>(cfg);
    restore_generator(g, ck, /*allow_extra=*/true);
    if (cfg_out) *cfg_out = cfg;
    return g;
}

template <class T>
TranslatorBundle<T> bundle_from_checkpoint(const CheckpointData& ck, RunConfig* cfg_out = nullptr) {
    RunConfig cfg = checkpoint_config(ck);
    auto b = make_bundle<T>(cfg);
    restore_bundle(b, ck);
    if (cfg_out) *cfg_out = cfg;
    return b;
}

}  // namespace cyclevar
