#pragma once

#include <array>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "cyclevar/common.hpp"
#include "cyclevar/ops.hpp"
#include "cyclevar/rng.hpp"
#include "cyclevar/synth.hpp"
#include "cyclevar/tensor.hpp"

namespace cyclevar {

struct TransformerConfig {
    int width = 64;
    int heads = 4;
    int blocks = 4;
    int mlp_ratio = 4;
    int token_dim = 16;  // channel count of the latent maps fed in
    int vocab = 64;      // classifier width for the index head
    bool bitwise = false;
    int bitwise_d = 16;  // per-site bit count when the bitwise head is active
    std::vector<std::array<int, 2>> scales;  // (h_k,w_k), coarse to fine
    double ln_eps = 1e-5;

    int head_dim() const { return width / heads; }
    int logits_dim() const { return bitwise ? 2 * bitwise_d : vocab; }
    int K() const { return int(scales.size()); }
    int scale_tokens(int k) const { return scales[size_t(k)][0] * scales[size_t(k)][1]; }

    void validate() const {
        require(width >= 1 && heads >= 1 && blocks >= 1 && mlp_ratio >= 1,
                "TransformerConfig: bad dims");
        require(width % heads == 0, "TransformerConfig: width " + std::to_string(width) +
                                        " not divisible by heads " + std::to_string(heads));
        require(!scales.empty(), "TransformerConfig: empty scale list");
        require(bitwise ? bitwise_d >= 1 : vocab >= 2, "TransformerConfig: bad head size");
    }
};

// Learned per-domain AdaLN condition vectors plus the start token. The start
// token lives in latent-channel space; the input projection lifts it to model
// width when it enters the sequence, so it can also serve as the coarse map
// the first fusion step adds to.
template <class T>
struct ConditionEmbedding {
    Tensor<T> t_x, t_y;  // [1,width]
    Tensor<T> s;         // [1,token_dim]

    static ConditionEmbedding make(int width, int token_dim, Rng& rng) {
        ConditionEmbedding c;
        c.t_x = Tensor<T>::randn({1, width}, rng, 0.5, true);
        c.t_y = Tensor<T>::randn({1, width}, rng, 0.5, true);
        c.s = Tensor<T>::randn({1, token_dim}, rng, 0.5, true);
        return c;
    }

    const Tensor<T>& domain(Domain d) const { return d == Domain::x ? t_x : t_y; }

    template <class Fn>
    void visit_params(Fn&& fn) {
        fn(t_x);
        fn(t_y);
        fn(s);
    }
};

template <class T>
struct TransformerBlock {
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;  // attention projections
    Tensor<T> w1, b1, w2, b2;                  // MLP
    Tensor<T> mod_w, mod_b;                    // condition -> [shift1 scale1 gate1 shift2 scale2 gate2]
};

// Per-block AdaLN tensors derived from one condition vector.
template <class T>
struct Modulation {
    Tensor<T> shift1, scale1, gate1, shift2, scale2, gate2;  // each [width]
};

template <class T>
struct Transformer {
    TransformerConfig cfg;
    Tensor<T> in_w, in_b;             // token projection [C,width], [width]
    std::vector<Tensor<T>> pos;       // learned positional table per scale, [n_k,width]
    Tensor<T> scale_emb;              // one row per scale, [K,width]
    std::vector<TransformerBlock<T>> blocks;
    Tensor<T> head_w, head_b;         // classifier [width,logits], [logits]

    static Transformer make(const TransformerConfig& cfg, Rng& rng) {
        cfg.validate();
        Transformer tr;
        tr.cfg = cfg;
        const int w = cfg.width;
        const double std = 0.02;

        tr.in_w = Tensor<T>::randn({cfg.token_dim, w}, rng, std::sqrt(1.0 / cfg.token_dim), true);
        tr.in_b = Tensor<T>::zeros({w}, true);
        for (int k = 0; k < cfg.K(); ++k)
            tr.pos.push_back(Tensor<T>::randn({cfg.scale_tokens(k), w}, rng, std, true));
        tr.scale_emb = Tensor<T>::randn({cfg.K(), w}, rng, std, true);

        for (int b = 0; b < cfg.blocks; ++b) {
            TransformerBlock<T> blk;
            auto lin = [&](int di, int dj) { return Tensor<T>::randn({di, dj}, rng, std::sqrt(1.0 / di), true); };
            blk.wq = lin(w, w);
            blk.wk = lin(w, w);
            blk.wv = lin(w, w);
            blk.wo = lin(w, w);
            blk.bq = Tensor<T>::zeros({w}, true);
            blk.bk = Tensor<T>::zeros({w}, true);
            blk.bv = Tensor<T>::zeros({w}, true);
            blk.bo = Tensor<T>::zeros({w}, true);
            blk.w1 = lin(w, w * cfg.mlp_ratio);
            blk.b1 = Tensor<T>::zeros({w * cfg.mlp_ratio}, true);
            blk.w2 = lin(w * cfg.mlp_ratio, w);
            blk.b2 = Tensor<T>::zeros({w}, true);
            // shift/scale columns start small so conditioning is live from step
            // one; gate columns start at zero so each block opens as identity
            std::vector<T> mw(size_t(w) * 6 * w, T(0));
            Rng* r = &rng;
            for (int i = 0; i < w; ++i)
                for (int j = 0; j < 6 * w; ++j) {
                    const int chunk = j / w;
                    if (chunk == 2 || chunk == 5) continue;  // gates stay zero
                    mw[size_t(i) * 6 * w + j] = T(std * r->normal());
                }
            blk.mod_w = Tensor<T>::leaf({w, 6 * w}, std::move(mw), true);
            blk.mod_b = Tensor<T>::zeros({6 * w}, true);
            tr.blocks.push_back(std::move(blk));
        }

        tr.head_w = Tensor<T>::randn({w, cfg.logits_dim()}, rng, std, true);
        tr.head_b = Tensor<T>::zeros({cfg.logits_dim()}, true);
        return tr;
    }

    template <class Fn>
    void visit_params(Fn&& fn) {
        fn(in_w);
        fn(in_b);
        for (auto& p : pos) fn(p);
        fn(scale_emb);
        for (auto& b : blocks) {
            fn(b.wq); fn(b.bq); fn(b.wk); fn(b.bk); fn(b.wv); fn(b.bv); fn(b.wo); fn(b.bo);
            fn(b.w1); fn(b.b1); fn(b.w2); fn(b.b2);
            fn(b.mod_w); fn(b.mod_b);
        }
        fn(head_w);
        fn(head_b);
    }

    std::vector<Tensor<T>> params() {
        std::vector<Tensor<T>> out;
        visit_params([&out](Tensor<T>& p) { out.push_back(p); });
        return out;
    }

    void set_trainable(bool on) {
        visit_params([on](Tensor<T>& p) { p.set_requires_grad(on); });
    }
};

// ---------------------------------------------------------------------------
// embedding

namespace detail {

template <class T>
Tensor<T> embed_tokens(const Transformer<T>& tr, int k, const Tensor<T>& tokens) {
    auto x = add_rowvec(matmul(tokens, tr.in_w), tr.in_b);
    x = add(x, tr.pos[size_t(k)]);
    return add_rowvec(x, reshape(slice_rows(tr.scale_emb, k, k + 1), {tr.cfg.width}));
}

}  // namespace detail

// The start token broadcast over the coarsest scale's sites, lifted to model
// width and given that scale's positional terms.
template <class T>
Tensor<T> embed_start(const Transformer<T>& tr, const ConditionEmbedding<T>& cond) {
    require(cond.s.ndim() == 2 && cond.s.dim(0) == 1 && cond.s.dim(1) == tr.cfg.token_dim,
            "embed_start: start token must be [1,token_dim], got " + shape_str(cond.s.shape()));
    const int n0 = tr.cfg.scale_tokens(0);
    Tensor<T> rows = cond.s;
    if (n0 > 1) rows = matmul(Tensor<T>::full({n0, 1}, T(1)), cond.s);
    return detail::embed_tokens(tr, 0, rows);
}

// The start token as a latent map at the coarsest scale, for fusion arithmetic.
template <class T>
Tensor<T> start_map(const Transformer<T>& tr, const ConditionEmbedding<T>& cond) {
    const int n0 = tr.cfg.scale_tokens(0);
    Tensor<T> rows = cond.s;
    if (n0 > 1) rows = matmul(Tensor<T>::full({n0, 1}, T(1)), cond.s);
    return tokens_to_chw(rows, tr.cfg.scales[0][0], tr.cfg.scales[0][1]);
}

// Map slot for scale k: project sites to model width, add the scale's
// positional table and its scale-index row.
template <class T>
Tensor<T> embed_map(const Transformer<T>& tr, int k, const Tensor<T>& map) {
    require(k >= 0 && k < tr.cfg.K(), "embed_map: scale index out of range");
    require(map.ndim() == 3 && map.dim(0) == tr.cfg.token_dim &&
                map.dim(1) == tr.cfg.scales[size_t(k)][0] &&
                map.dim(2) == tr.cfg.scales[size_t(k)][1],
            "embed_map: map " + shape_str(map.shape()) + " does not fit scale " +
                std::to_string(k));
    return detail::embed_tokens(tr, k, chw_to_tokens(map));
}

// ---------------------------------------------------------------------------
// attention core

template <class T>
Modulation<T> adaln_modulate(const TransformerBlock<T>& blk, const Tensor<T>& t) {
    require(t.ndim() == 2 && t.dim(0) == 1 && t.dim(1) == blk.mod_w.dim(0),
            "adaln_modulate: condition must be [1,width], got " + shape_str(t.shape()));
    const int w = blk.mod_w.dim(0);
    auto m = add_rowvec(matmul(silu(t), blk.mod_w), blk.mod_b);
    auto chunk = [&](int i) { return reshape(slice_cols(m, i * w, (i + 1) * w), {w}); };
    return Modulation<T>{chunk(0), chunk(1), chunk(2), chunk(3), chunk(4), chunk(5)};
}

namespace detail {

template <class T>
Tensor<T> modulate(const Tensor<T>& x, const Tensor<T>& shift, const Tensor<T>& scale,
                   double eps) {
    auto h = layer_norm_rows(x, eps);
    return add_rowvec(mul_rowvec(h, add_scalar(scale, T(1))), shift);
}

// Multi-head attention of q rows against a full key/value sequence. The mask,
// when present, is added to every head's scores ([Nq,Nk], 0 = allowed).
template <class T>
Tensor<T> attention(const TransformerBlock<T>& blk, const Tensor<T>& qx, const Tensor<T>& kx,
                    const Tensor<T>& vx, int heads, const Tensor<T>* mask) {
    const int w = qx.dim(1), hd = w / heads;
    const double inv = 1.0 / std::sqrt(double(hd));
    std::vector<Tensor<T>> outs;
    outs.reserve(size_t(heads));
    for (int h = 0; h < heads; ++h) {
        auto qh = slice_cols(qx, h * hd, (h + 1) * hd);
        auto kh = slice_cols(kx, h * hd, (h + 1) * hd);
        auto vh = slice_cols(vx, h * hd, (h + 1) * hd);
        auto scores = mul_scalar(matmul(qh, transpose2d(kh)), T(inv));
        if (mask) scores = add(scores, *mask);
        outs.push_back(matmul(softmax_rows(scores, 1.0), vh));
    }
    return add_rowvec(matmul(concat_cols(outs), blk.wo), blk.bo);
}

template <class T>
Tensor<T> block_forward(const TransformerBlock<T>& blk, const Tensor<T>& x,
                        const Modulation<T>& mod, int heads, double eps, const Tensor<T>* mask,
                        const Tensor<T>* k_seq, const Tensor<T>* v_seq) {
    auto h = modulate(x, mod.shift1, mod.scale1, eps);
    auto q = add_rowvec(matmul(h, blk.wq), blk.bq);
    auto k = add_rowvec(matmul(h, blk.wk), blk.bk);
    auto v = add_rowvec(matmul(h, blk.wv), blk.bv);
    // with a cache, keys/values cover the whole sequence so far
    Tensor<T> kf = k_seq ? *k_seq : k;
    Tensor<T> vf = v_seq ? *v_seq : v;
    auto x1 = add(x, mul_rowvec(attention(blk, q, kf, vf, heads, mask), mod.gate1));
    auto m = modulate(x1, mod.shift2, mod.scale2, eps);
    m = add_rowvec(matmul(silu(add_rowvec(matmul(m, blk.w1), blk.b1)), blk.w2), blk.b2);
    return add(x1, mul_rowvec(m, mod.gate2));
}

// Additive block-causal mask: query tokens in slot i may attend to key tokens
// in slots <= i. Constant, so it never joins the gradient graph.
template <class T>
Tensor<T> block_causal_mask(const std::vector<int>& sizes) {
    int total = 0;
    for (int s : sizes) total += s;
    std::vector<T> m(size_t(total) * total, T(0));
    int q0 = 0;
    for (size_t i = 0; i < sizes.size(); ++i) {
        int kbegin = 0;
        for (size_t j = 0; j <= i; ++j) kbegin += sizes[j];
        for (int qi = q0; qi < q0 + sizes[i]; ++qi)
            for (int kj = kbegin; kj < total; ++kj) m[size_t(qi) * total + kj] = T(-1e30);
        q0 += sizes[i];
    }
    return Tensor<T>::leaf({total, total}, std::move(m));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// full-sequence and incremental forward

// Runs the block stack over an ordered list of embedded slots under the
// block-causal mask (or a caller-supplied additive mask) and returns one
// feature map per slot.
template <class T>
std::vector<Tensor<T>> forward_all(const Transformer<T>& tr,
                                   const std::vector<Tensor<T>>& slots, const Tensor<T>& t,
                                   const Tensor<T>* custom_mask = nullptr) {
    require(!slots.empty(), "forward_all: no slots");
    std::vector<int> sizes;
    for (const auto& s : slots) {
        require(s.ndim() == 2 && s.dim(1) == tr.cfg.width,
                "forward_all: slot must be [n,width], got " + shape_str(s.shape()));
        sizes.push_back(s.dim(0));
    }
    Tensor<T> x = slots.size() == 1 ? slots[0] : concat_rows(slots);
    Tensor<T> mask = custom_mask ? *custom_mask : detail::block_causal_mask<T>(sizes);
    for (const auto& blk : tr.blocks) {
        auto mod = adaln_modulate(blk, t);
        x = detail::block_forward(blk, x, mod, tr.cfg.heads, tr.cfg.ln_eps, &mask,
                                  static_cast<const Tensor<T>*>(nullptr),
                                  static_cast<const Tensor<T>*>(nullptr));
    }
    std::vector<Tensor<T>> outs;
    int at = 0;
    for (int n : sizes) {
        outs.push_back(slice_rows(x, at, at + n));
        at += n;
    }
    return outs;
}

// Appended key/value sequences per block. Chunks stay on the autograd tape, so
// serial decoding remains differentiable end to end.
template <class T>
struct KvCache {
    struct BlockKv {
        std::vector<Tensor<T>> k_chunks, v_chunks;
    };
    std::vector<BlockKv> blocks;
    std::vector<int> expected_sizes;  // token count each appended slot must have, in order
    std::vector<int> offsets;         // cumulative token boundaries after each append
    int appended = 0;

    static KvCache make(const TransformerConfig& cfg) {
        KvCache c;
        c.blocks.resize(size_t(cfg.blocks));
        for (int k = 0; k < cfg.K(); ++k) c.expected_sizes.push_back(cfg.scale_tokens(k));
        return c;
    }

    int total_tokens() const { return offsets.empty() ? 0 : offsets.back(); }
};

// Processes one new slot against everything already appended. Slots must
// arrive in schedule order; each call appends the slot's keys/values.
template <class T>
Tensor<T> forward_step(const Transformer<T>& tr, const Tensor<T>& slot, const Tensor<T>& t,
                       KvCache<T>& cache) {
    require(slot.ndim() == 2 && slot.dim(1) == tr.cfg.width,
            "forward_step: slot must be [n,width], got " + shape_str(slot.shape()));
    require(cache.appended < int(cache.expected_sizes.size()),
            "forward_step: cache already holds the full schedule");
    require(slot.dim(0) == cache.expected_sizes[size_t(cache.appended)],
            "forward_step: scale-order violation, slot has " + std::to_string(slot.dim(0)) +
                " tokens but schedule position " + std::to_string(cache.appended) + " takes " +
                std::to_string(cache.expected_sizes[size_t(cache.appended)]));

    Tensor<T> x = slot;
    for (size_t b = 0; b < tr.blocks.size(); ++b) {
        const auto& blk = tr.blocks[b];
        auto mod = adaln_modulate(blk, t);
        auto h = detail::modulate(x, mod.shift1, mod.scale1, tr.cfg.ln_eps);
        auto k = add_rowvec(matmul(h, blk.wk), blk.bk);
        auto v = add_rowvec(matmul(h, blk.wv), blk.bv);
        auto& kv = cache.blocks[b];
        kv.k_chunks.push_back(k);
        kv.v_chunks.push_back(v);
        Tensor<T> kf = kv.k_chunks.size() == 1 ? k : concat_rows(kv.k_chunks);
        Tensor<T> vf = kv.v_chunks.size() == 1 ? v : concat_rows(kv.v_chunks);
        // every cached slot is earlier or current, so no mask is needed
        x = detail::block_forward(blk, x, mod, tr.cfg.heads, tr.cfg.ln_eps,
                                  static_cast<const Tensor<T>*>(nullptr), &kf, &vf);
    }
    cache.appended += 1;
    cache.offsets.push_back(cache.total_tokens() + slot.dim(0));
    return x;
}

// Site logits from final features: LN then the linear head. V columns for the
// index head, 2d columns for the bitwise head.
template <class T>
Tensor<T> classify(const Transformer<T>& tr, const Tensor<T>& h) {
    require(h.ndim() == 2 && h.dim(1) == tr.cfg.width,
            "classify: want [n,width], got " + shape_str(h.shape()));
    return add_rowvec(matmul(layer_norm_rows(h, tr.cfg.ln_eps), tr.head_w), tr.head_b);
}

}  // namespace cyclevar
