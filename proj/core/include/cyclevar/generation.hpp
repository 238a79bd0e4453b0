#pragma once

#include <chrono>
#include <string>
#include <utility>
#include <vector>

#include "cyclevar/common.hpp"
#include "cyclevar/ops.hpp"
#include "cyclevar/quantizer.hpp"
#include "cyclevar/tokenizer.hpp"
#include "cyclevar/transformer.hpp"

namespace cyclevar {

struct GenerationConfig {
    enum class Mode { serial, parallel };
    Mode mode = Mode::parallel;
    double a = 0.5;  // fusion weight between generated and source features
    SRQConfig srq;
    bool hard = false;       // argmax lookup instead of SRQ (kills classifier gradients)
    bool use_cache = true;   // serial mode only
    bool drop_ms_output = false;   // parallel ablation: keep only the finest residual
    bool drop_ms_context = false;  // parallel ablation: finest queries see only their own scale
    ResizeMode up_mode = ResizeMode::bilinear;
    BitwiseConfig bitwise{16, BitwiseMode::lfq};  // active only with a bitwise head

    void validate() const {
        require(a >= 0.0 && a <= 1.0, "GenerationConfig: fusion weight a must be in [0,1]");
        if (mode == Mode::serial)
            require(!drop_ms_output && !drop_ms_context,
                    "GenerationConfig: ablation flags are parallel-mode only");
    }
};

template <class T>
struct GenerationState {
    std::vector<Tensor<T>> Rhat;  // predicted residual maps per scale
    Tensor<T> Ehat;               // final latent
    int forward_calls = 0;
    double wall_ms = 0;
};

// Everything one translation direction needs: frozen tokenizer plus the
// trainable transformer and condition embeddings.
template <class T>
struct Generator {
    Vae<T> vae;
    Codebook<T> cb;
    ScaleSchedule sched;
    Transformer<T> tr;
    ConditionEmbedding<T> cond;
};

namespace detail {

// Site logits -> quantized token rows through the configured quantizer.
template <class T>
Tensor<T> quantize_sites(const Transformer<T>& tr, const Codebook<T>& cb, const Tensor<T>& logits,
                         const GenerationConfig& cfg, Rng* rng) {
    if (tr.cfg.bitwise) {
        const int n = logits.dim(0);
        auto pairs = reshape(logits, {n * cfg.bitwise.d, 2});
        return srq_bitwise(pairs, cfg.bitwise, cfg.srq, rng);
    }
    if (cfg.hard) return hard_quantize_logits(logits, cb);
    return srq_quantize(logits, cb, cfg.srq, rng);
}

struct WallClock {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double ms() const {
        return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count();
    }
};

}  // namespace detail

// Serial multi-step decoding: K refinement steps, each one transformer forward
// over the start token and the fused maps produced so far.
template <class T>
GenerationState<T> serial_generate(const Transformer<T>& tr, const Codebook<T>& cb,
                                   const ConditionEmbedding<T>& cond,
                                   const std::vector<Tensor<T>>& F, const Tensor<T>& t,
                                   const GenerationConfig& cfg, Rng* rng = nullptr) {
    cfg.validate();
    require(cfg.mode == GenerationConfig::Mode::serial, "serial_generate: config is not serial");
    const int K = tr.cfg.K();
    require(int(F.size()) == K, "serial_generate: want " + std::to_string(K) +
                                    " context maps, got " + std::to_string(F.size()));
    detail::WallClock clock;
    GenerationState<T> state;

    KvCache<T> cache = KvCache<T>::make(tr.cfg);
    std::vector<Tensor<T>> slots;  // full recompute path when the cache is off

    Tensor<T> h_map = start_map(tr, cond);  // latent-space map of the current slot
    Tensor<T> slot = embed_start(tr, cond);
    for (int j = 0; j < K; ++j) {
        Tensor<T> feat;
        if (cfg.use_cache) {
            feat = forward_step(tr, slot, t, cache);
        } else {
            slots.push_back(slot);
            feat = forward_all(tr, slots, t).back();
        }
        state.forward_calls += 1;

        auto rtok = detail::quantize_sites(tr, cb, classify(tr, feat), cfg, rng);
        auto rmap = tokens_to_chw(rtok, tr.cfg.scales[size_t(j)][0], tr.cfg.scales[size_t(j)][1]);
        state.Rhat.push_back(rmap);

        // fuse generation with source context; a=0 passes the source through
        auto fused = lerp_fixed(add(rmap, h_map), F[size_t(j)], T(cfg.a));
        if (j + 1 < K) {
            h_map = resize(fused, tr.cfg.scales[size_t(j + 1)][0], tr.cfg.scales[size_t(j + 1)][1],
                           cfg.up_mode);
            slot = embed_map(tr, j + 1, h_map);
        } else {
            state.Ehat = fused;
        }
    }
    state.wall_ms = clock.ms();
    return state;
}

// Parallel one-step decoding: all scales in one block-causal forward, then the
// fused sum of upsampled predictions.
template <class T>
GenerationState<T> parallel_generate(const Transformer<T>& tr, const Codebook<T>& cb,
                                     const std::vector<Tensor<T>>& F, const Tensor<T>& t,
                                     const GenerationConfig& cfg, Rng* rng = nullptr) {
    cfg.validate();
    require(cfg.mode == GenerationConfig::Mode::parallel,
            "parallel_generate: config is not parallel");
    const int K = tr.cfg.K();
    require(int(F.size()) == K, "parallel_generate: want " + std::to_string(K) +
                                    " context maps, got " + std::to_string(F.size()));
    detail::WallClock clock;
    GenerationState<T> state;

    std::vector<Tensor<T>> slots;
    std::vector<int> sizes;
    for (int j = 0; j < K; ++j) {
        slots.push_back(embed_map(tr, j, F[size_t(j)]));
        sizes.push_back(tr.cfg.scale_tokens(j));
    }
    std::vector<Tensor<T>> feats;
    if (cfg.drop_ms_context) {
        // final-scale queries attend to their own scale only
        auto mask = detail::block_causal_mask<T>(sizes);
        int total = 0;
        for (int n : sizes) total += n;
        const int last = sizes.back();
        auto& mv = mask.val();
        for (int qi = total - last; qi < total; ++qi)
            for (int kj = 0; kj < total - last; ++kj) mv[size_t(qi) * total + kj] = T(-1e30);
        feats = forward_all(tr, slots, t, &mask);
    } else {
        feats = forward_all(tr, slots, t);
    }
    state.forward_calls = 1;

    for (int j = 0; j < K; ++j) {
        auto rtok = detail::quantize_sites(tr, cb, classify(tr, feats[size_t(j)]), cfg, rng);
        state.Rhat.push_back(
            tokens_to_chw(rtok, tr.cfg.scales[size_t(j)][0], tr.cfg.scales[size_t(j)][1]));
    }

    const int hK = tr.cfg.scales.back()[0], wK = tr.cfg.scales.back()[1];
    Tensor<T> gen;
    if (cfg.drop_ms_output) {
        gen = resize(state.Rhat.back(), hK, wK, cfg.up_mode);
    } else {
        gen = resize(state.Rhat[0], hK, wK, cfg.up_mode);
        for (int j = 1; j < K; ++j)
            gen = add(gen, resize(state.Rhat[size_t(j)], hK, wK, cfg.up_mode));
    }
    state.Ehat = lerp_fixed(gen, F.back(), T(cfg.a));
    state.wall_ms = clock.ms();
    return state;
}

template <class T>
GenerationState<T> generate(const Generator<T>& gen, const std::vector<Tensor<T>>& F,
                            Domain target, const GenerationConfig& cfg, Rng* rng = nullptr) {
    const Tensor<T>& t = gen.cond.domain(target);
    if (cfg.mode == GenerationConfig::Mode::serial)
        return serial_generate(gen.tr, gen.cb, gen.cond, F, t, cfg, rng);
    return parallel_generate(gen.tr, gen.cb, F, t, cfg, rng);
}

// Full translation: tokenize the source image, decode the generated latent.
// Differentiable end to end; the tokenizer stays frozen by convention.
template <class T>
ImageTensor<T> translate(const Generator<T>& gen, const Tensor<T>& img, Domain target,
                         const GenerationConfig& cfg, Rng* rng = nullptr,
                         GenerationState<T>* state_out = nullptr) {
    auto pyr = tokenize_multiscale(gen.vae.encode(img), gen.cb, gen.sched);
    auto F = build_context(pyr, gen.sched);
    auto state = generate(gen, F, target, cfg, rng);
    auto out = gen.vae.decode(state.Ehat);
    if (state_out) *state_out = std::move(state);
    return out;
}

}  // namespace cyclevar
