#pragma once

#include "cyclevar/ops.hpp"

namespace cyclevar {

// Learnable codebook Z[V,C]. Rows are the discrete vocabulary; every
// quantization backend below reads it, only training writes it.
template <class T>
struct Codebook {
    Tensor<T> z;

    Codebook() = default;
    explicit Codebook(Tensor<T> z_) : z(std::move(z_)) { validate(); }

    static Codebook random(int v, int c, Rng& rng, double stddev = 0.5, bool trainable = true) {
        return Codebook(Tensor<T>::randn({v, c}, rng, stddev, trainable));
    }

    int V() const { return z.dim(0); }
    int C() const { return z.dim(1); }

    void validate() const {
        require(z.defined() && z.ndim() == 2, "codebook: Z must be [V,C]");
        require(z.dim(0) >= 2, "codebook: V must be >= 2, got " + std::to_string(z.dim(0)));
        require(z.dim(1) >= 1, "codebook: C must be >= 1, got " + std::to_string(z.dim(1)));
        for (T v : z.val())
            require(std::isfinite(double(v)), "codebook: non-finite entry");
    }
};

struct SRQConfig {
    double tau = 2.0;   // distribution sharpness; the hard limit is tau -> 0
    bool gumbel = false;
    uint64_t seed = 0;  // noise stream seed, used only when gumbel is on
};

enum class BitwiseMode { lfq, bsq };

struct BitwiseConfig {
    int d = 1;
    BitwiseMode mode = BitwiseMode::lfq;
};

// Per-site logits g[N,V] and, once materialized, the relaxed distributions.
template <class T>
struct QuantLogits {
    Tensor<T> g;
    Tensor<T> probs;  // undefined until srq_probs ran
};

namespace detail {
template <class T>
Tensor<T> maybe_gumbel(const Tensor<T>& g, const SRQConfig& cfg, Rng* rng) {
    if (!cfg.gumbel) return g;
    Rng local(cfg.seed, "gumbel");
    Rng& r = rng ? *rng : local;
    std::vector<T> noise(size_t(g.size()));
    for (auto& n : noise) n = T(r.gumbel());
    return add(g, Tensor<T>::leaf(g.shape(), std::move(noise), false));
}
}  // namespace detail

// Relaxed assignment distributions: softmax((g + gumbel?)/tau) per site.
// Rows of g are independent sites; pass rng to thread one noise stream
// across calls.
template <class T>
Tensor<T> srq_probs(const Tensor<T>& g, const SRQConfig& cfg, Rng* rng = nullptr) {
    require(g.ndim() == 2, "srq_probs: logits must be [N,V], got " + shape_str(g.shape()));
    require(cfg.tau > 0, "srq_probs: tau must be > 0, got " + std::to_string(cfg.tau));
    return softmax_rows(detail::maybe_gumbel(g, cfg, rng), cfg.tau);
}

// Relaxed quantization: probability-weighted average over codebook rows.
// Differentiable in both g and Z; recovers the hard lookup as tau -> 0 and
// the codebook mean as tau -> inf.
template <class T>
Tensor<T> srq_quantize(const Tensor<T>& g, const Codebook<T>& cb, const SRQConfig& cfg,
                       Rng* rng = nullptr) {
    require(g.ndim() == 2 && g.dim(1) == cb.V(),
            "srq_quantize: logits " + shape_str(g.shape()) + " do not match codebook V=" +
                std::to_string(cb.V()));
    return matmul(srq_probs(g, cfg, rng), cb.z);
}

template <class T>
QuantLogits<T> make_quant_logits(const Tensor<T>& g, const SRQConfig& cfg, Rng* rng = nullptr) {
    return QuantLogits<T>{g, srq_probs(g, cfg, rng)};
}

// Hard argmax lookup; piecewise constant, so gradients upstream are exactly
// zero (the graph is cut at this node).
template <class T>
Tensor<T> hard_quantize_logits(const Tensor<T>& g, const Codebook<T>& cb) {
    return argmax_lookup(g, cb.z);
}

// Hard nearest-code lookup with a straight-through backward: identity to f,
// zero to the codebook.
template <class T>
Tensor<T> ste_lookup(const Tensor<T>& f, const Codebook<T>& cb) {
    return ste_nearest_lookup(f, cb.z);
}

// Hard nearest-code lookup with no gradient path at all (contrast case and
// inference path).
template <class T>
Tensor<T> hard_lookup(const Tensor<T>& f, const Codebook<T>& cb) {
    auto idx = nearest_code(f, cb.z);
    NoGradGuard ng;
    return gather_rows(cb.z, idx);
}

inline double bitwise_magnitude(const BitwiseConfig& cfg) {
    require(cfg.d >= 1, "bitwise: d must be >= 1, got " + std::to_string(cfg.d));
    return cfg.mode == BitwiseMode::lfq ? 1.0 : 1.0 / std::sqrt(double(cfg.d));
}

// Hard bitwise quantizer over f[N,d]. LFQ: elementwise sign into {-1,+1}
// with sign(0)=+1. BSQ: same signs scaled to 1/sqrt(d), so each output row
// has unit norm; an all-zero row has no direction and errors.
template <class T>
Tensor<T> bitwise_quantize(const Tensor<T>& f, const BitwiseConfig& cfg) {
    require(f.ndim() == 2 && f.dim(1) == cfg.d,
            "bitwise_quantize: want [N," + std::to_string(cfg.d) + "], got " + shape_str(f.shape()));
    const T b = T(bitwise_magnitude(cfg));
    const int n = f.dim(0), d = f.dim(1);
    auto out = Tensor<T>::interior(f.shape());  // piecewise constant: no parents
    const auto& fv = f.val();
    auto& ov = out.val();
    for (int i = 0; i < n; ++i) {
        if (cfg.mode == BitwiseMode::bsq) {
            T norm2 = 0;
            for (int j = 0; j < d; ++j) norm2 += fv[size_t(i) * d + j] * fv[size_t(i) * d + j];
            require(norm2 > T(0), "bitwise_quantize: BSQ zero vector at site " + std::to_string(i));
        }
        for (int j = 0; j < d; ++j)
            ov[size_t(i) * d + j] = fv[size_t(i) * d + j] >= T(0) ? b : -b;
    }
    return out;
}

// Relaxed bitwise quantizer. logits2[M,2] holds (negative, positive) logits,
// d consecutive rows per site; each row's 2-way softmax mixes -b and +b.
// Equivalent to M independent srq_quantize calls with codebook {(-b),(+b)}.
template <class T>
Tensor<T> srq_bitwise(const Tensor<T>& logits2, const BitwiseConfig& bits, const SRQConfig& cfg,
                      Rng* rng = nullptr) {
    require(logits2.ndim() == 2 && logits2.dim(1) == 2,
            "srq_bitwise: want [M,2] per-dim logits, got " + shape_str(logits2.shape()));
    require(logits2.dim(0) % bits.d == 0,
            "srq_bitwise: row count " + std::to_string(logits2.dim(0)) + " not a multiple of d=" +
                std::to_string(bits.d));
    const T b = T(bitwise_magnitude(bits));
    auto probs = srq_probs(logits2, cfg, rng);
    auto ends = Tensor<T>::leaf({2, 1}, {-b, b}, false);
    auto mixed = matmul(probs, ends);  // [M,1]
    return reshape(mixed, Shape{logits2.dim(0) / bits.d, bits.d});
}

}  // namespace cyclevar
