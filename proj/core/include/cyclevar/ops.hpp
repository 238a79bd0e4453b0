#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

#include "cyclevar/tensor.hpp"

namespace cyclevar {

// ---------------------------------------------------------------------------
// Raw kernels. Row-major. The three matmul variants cover every adjoint in
// the op set; dot_span keeps reductions vectorizable without reassociation
// flags (fixed 8-lane association, deterministic).
// ---------------------------------------------------------------------------

template <class T>
inline T dot_span(const T* a, const T* b, int n) {
    T acc0 = 0, acc1 = 0, acc2 = 0, acc3 = 0, acc4 = 0, acc5 = 0, acc6 = 0, acc7 = 0;
    int k = 0;
    for (; k + 8 <= n; k += 8) {
        acc0 += a[k + 0] * b[k + 0];
        acc1 += a[k + 1] * b[k + 1];
        acc2 += a[k + 2] * b[k + 2];
        acc3 += a[k + 3] * b[k + 3];
        acc4 += a[k + 4] * b[k + 4];
        acc5 += a[k + 5] * b[k + 5];
        acc6 += a[k + 6] * b[k + 6];
        acc7 += a[k + 7] * b[k + 7];
    }
    T s = ((acc0 + acc4) + (acc1 + acc5)) + ((acc2 + acc6) + (acc3 + acc7));
    for (; k < n; ++k) s += a[k] * b[k];
    return s;
}

// C[M,N] += A[M,K] * B[K,N]. Four output rows per pass so each B row is
// loaded once per four A rows instead of once per row.
template <class T>
inline void mm_ab(const T* __restrict a, const T* __restrict b, T* __restrict c, int m, int k,
                  int n) {
    int i = 0;
    for (; i + 4 <= m; i += 4) {
        const T* a0 = a + size_t(i) * k;
        const T* a1 = a0 + k;
        const T* a2 = a1 + k;
        const T* a3 = a2 + k;
        T* c0 = c + size_t(i) * n;
        T* c1 = c0 + n;
        T* c2 = c1 + n;
        T* c3 = c2 + n;
        for (int kk = 0; kk < k; ++kk) {
            const T* brow = b + size_t(kk) * n;
            const T v0 = a0[kk], v1 = a1[kk], v2 = a2[kk], v3 = a3[kk];
            for (int j = 0; j < n; ++j) {
                const T bj = brow[j];
                c0[j] += v0 * bj;
                c1[j] += v1 * bj;
                c2[j] += v2 * bj;
                c3[j] += v3 * bj;
            }
        }
    }
    for (; i < m; ++i) {
        const T* arow = a + size_t(i) * k;
        T* crow = c + size_t(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const T av = arow[kk];
            const T* brow = b + size_t(kk) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T
template <class T>
inline void mm_abt(const T* __restrict a, const T* __restrict b, T* __restrict c, int m, int k,
                   int n) {
    for (int i = 0; i < m; ++i) {
        const T* arow = a + size_t(i) * k;
        T* crow = c + size_t(i) * n;
        for (int j = 0; j < n; ++j) crow[j] += dot_span(arow, b + size_t(j) * k, k);
    }
}

// C[K,N] += A[M,K]^T * B[M,N]
template <class T>
inline void mm_atb(const T* __restrict a, const T* __restrict b, T* __restrict c, int m, int k,
                   int n) {
    int i = 0;
    for (; i + 4 <= m; i += 4) {
        const T* a0 = a + size_t(i) * k;
        const T* a1 = a0 + k;
        const T* a2 = a1 + k;
        const T* a3 = a2 + k;
        const T* b0 = b + size_t(i) * n;
        const T* b1 = b0 + n;
        const T* b2 = b1 + n;
        const T* b3 = b2 + n;
        for (int kk = 0; kk < k; ++kk) {
            T* crow = c + size_t(kk) * n;
            const T v0 = a0[kk], v1 = a1[kk], v2 = a2[kk], v3 = a3[kk];
            for (int j = 0; j < n; ++j)
                crow[j] += v0 * b0[j] + v1 * b1[j] + v2 * b2[j] + v3 * b3[j];
        }
    }
    for (; i < m; ++i) {
        const T* arow = a + size_t(i) * k;
        const T* brow = b + size_t(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const T av = arow[kk];
            if (av == T(0)) continue;
            T* crow = c + size_t(kk) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

inline int conv_out_extent(int in, int kernel, int stride, int pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

// x[Ci,H,W] -> col[Ci*kh*kw, Ho*Wo], zero padding.
template <class T>
inline void im2col(const T* x, int ci, int h, int w, int kh, int kw, int stride, int pad,
                   int ho, int wo, T* col) {
    int row = 0;
    for (int c = 0; c < ci; ++c) {
        const T* plane = x + size_t(c) * h * w;
        for (int di = 0; di < kh; ++di) {
            for (int dj = 0; dj < kw; ++dj) {
                T* dst = col + size_t(row++) * ho * wo;
                int o = 0;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + di;
                    if (iy < 0 || iy >= h) {
                        for (int ox = 0; ox < wo; ++ox) dst[o++] = T(0);
                        continue;
                    }
                    const T* srow = plane + size_t(iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + dj;
                        dst[o++] = (ix < 0 || ix >= w) ? T(0) : srow[ix];
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter col[Ci*kh*kw, Ho*Wo] back into x[Ci,H,W] (+=).
template <class T>
inline void col2im(const T* col, int ci, int h, int w, int kh, int kw, int stride, int pad,
                   int ho, int wo, T* x) {
    int row = 0;
    for (int c = 0; c < ci; ++c) {
        T* plane = x + size_t(c) * h * w;
        for (int di = 0; di < kh; ++di) {
            for (int dj = 0; dj < kw; ++dj) {
                const T* src = col + size_t(row++) * ho * wo;
                int o = 0;
                for (int oy = 0; oy < ho; ++oy) {
                    const int iy = oy * stride - pad + di;
                    if (iy < 0 || iy >= h) {
                        o += wo;
                        continue;
                    }
                    T* srow = plane + size_t(iy) * w;
                    for (int ox = 0; ox < wo; ++ox) {
                        const int ix = ox * stride - pad + dj;
                        if (ix >= 0 && ix < w) srow[ix] += src[o];
                        ++o;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Op builder. Parents are recorded only when gradient will flow, so constant
// subgraphs cost nothing to keep and free early.
// ---------------------------------------------------------------------------

template <class T>
inline Tensor<T> make_op(Shape out_shape, std::initializer_list<Tensor<T>> ins) {
    auto out = Tensor<T>::interior(std::move(out_shape));
    if (grad_mode_enabled()) {
        bool rg = false;
        for (const auto& t : ins) rg = rg || t.requires_grad();
        if (rg) {
            out.node()->requires_grad = true;
            for (const auto& t : ins) out.node()->parents.push_back(t.ptr());
        }
    }
    return out;
}

template <class T>
inline Tensor<T> make_op(Shape out_shape, const std::vector<Tensor<T>>& ins) {
    auto out = Tensor<T>::interior(std::move(out_shape));
    if (grad_mode_enabled()) {
        bool rg = false;
        for (const auto& t : ins) rg = rg || t.requires_grad();
        if (rg) {
            out.node()->requires_grad = true;
            for (const auto& t : ins) out.node()->parents.push_back(t.ptr());
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise binary / scalar
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.shape() == b.shape(),
            "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = make_op(a.shape(), {a, b});
    const auto &av = a.val(), &bv = b.val();
    auto& ov = out.val();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    if (out.requires_grad()) {
        auto an = a.ptr(), bn = b.ptr();
        Node<T>* on = out.node();
        on->backward = [an, bn, on] {
            if (an->requires_grad)
                for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
            if (bn->requires_grad)
                for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i];
        };
    }
    return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.shape() == b.shape(),
            "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = make_op(a.shape(), {a, b});
    const auto &av = a.val(), &bv = b.val();
    auto& ov = out.val();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    if (out.requires_grad()) {
        auto an = a.ptr(), bn = b.ptr();
        Node<T>* on = out.node();
        on->backward = [an, bn, on] {
            if (an->requires_grad)
                for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
            if (bn->requires_grad)
                for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] -= on->grad[i];
        };
    }
    return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.shape() == b.shape(),
            "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = make_op(a.shape(), {a, b});
    const auto &av = a.val(), &bv = b.val();
    auto& ov = out.val();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    if (out.requires_grad()) {
        auto an = a.ptr(), bn = b.ptr();
        Node<T>* on = out.node();
        on->backward = [an, bn, on] {
            if (an->requires_grad)
                for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * bn->value[i];
            if (bn->requires_grad)
                for (size_t i = 0; i < on->grad.size(); ++i) bn->grad[i] += on->grad[i] * an->value[i];
        };
    }
    return out;
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.shape() == b.shape(),
            "div: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto out = make_op(a.shape(), {a, b});
    const auto &av = a.val(), &bv = b.val();
    auto& ov = out.val();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] / bv[i];
    if (out.requires_grad()) {
        auto an = a.ptr(), bn = b.ptr();
        Node<T>* on = out.node();
        on->backward = [an, bn, on] {
            for (size_t i = 0; i < on->grad.size(); ++i) {
                const T inv = T(1) / bn->value[i];
                if (an->requires_grad) an->grad[i] += on->grad[i] * inv;
                if (bn->requires_grad) bn->grad[i] -= on->grad[i] * an->value[i] * inv * inv;
            }
        };
    }
    return out;
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    auto out = make_op(a.shape(), {a});
    const auto& av = a.val();
    auto& ov = out.val();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + c;
    if (out.requires_grad()) {
        auto an = a.ptr();
        Node<T>* on = out.node();
        on->backward = [an, on] {
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
        };
    }
    return out;
}

template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
    auto out = make_op(a.shape(), {a});
    const auto& av = a.val();
    auto& ov = out.val();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
    if (out.requires_grad()) {
        auto an = a.ptr();
        Node<T>* on = out.node();
        on->backward = [an, on, c] {
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * c;
        };
    }
    return out;
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
    return mul_scalar(a, T(-1));
}

// a*x + (1-a)*y. Folding both scales into one op keeps a=0 and a=1 bit-exact:
// the surviving term is copied, never scaled by a rounded complement.
template <class T>
Tensor<T> lerp_fixed(const Tensor<T>& x, const Tensor<T>& y, T a) {
    require(x.shape() == y.shape(),
            "lerp_fixed: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
    auto out = make_op(x.shape(), {x, y});
    const auto &xv = x.val(), &yv = y.val();
    auto& ov = out.val();
    const T b = T(1) - a;
    if (a == T(0)) {
        ov = yv;
    } else if (a == T(1)) {
        ov = xv;
    } else {
        for (size_t i = 0; i < ov.size(); ++i) ov[i] = a * xv[i] + b * yv[i];
    }
    if (out.requires_grad()) {
        auto xn = x.ptr(), yn = y.ptr();
        Node<T>* on = out.node();
        on->backward = [xn, yn, on, a, b] {
            if (xn->requires_grad)
                for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i] * a;
            if (yn->requires_grad)
                for (size_t i = 0; i < on->grad.size(); ++i) yn->grad[i] += on->grad[i] * b;
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise unary
// ---------------------------------------------------------------------------

namespace detail {

// exp with a float fast path: range-reduced degree-5 polynomial assembled by
// exponent bit stuffing, ~2 ulp, branch-free so elementwise loops vectorize.
// float32 training spends a large share of its time in exp (softmax, silu);
// float64 keeps libm exp so finite-difference checks see full precision.
template <class T>
inline T fexp(T x) {
    if constexpr (std::is_same_v<T, float>) {
        x = std::min(88.0f, std::max(-87.33f, x));
        const float t = x * 1.44269504089f;
        const float kf = std::floor(t + 0.5f);
        const float f = (x - kf * 0.693359375f) - kf * -2.12194440e-4f;
        float p = 1.9875691500e-4f;
        p = p * f + 1.3981999507e-3f;
        p = p * f + 8.3334519073e-3f;
        p = p * f + 4.1665795894e-2f;
        p = p * f + 1.6666665459e-1f;
        p = p * f + 5.0000001201e-1f;
        p = p * f * f + f + 1.0f;
        const int32_t ki = int32_t(kf);
        return p * std::bit_cast<float>(uint32_t(ki + 127) << 23);
    } else {
        return std::exp(x);
    }
}

template <class T>
inline T stable_sigmoid(T x) {
    const T e = fexp(-std::abs(x));
    const T s = T(1) / (T(1) + e);
    return x >= T(0) ? s : T(1) - s;
}

}  // namespace detail

template <class T>
Tensor<T> exp_(const Tensor<T>& a) {
    auto out = make_op(a.shape(), {a});
    const auto& av = a.val();
    auto& ov = out.val();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = detail::fexp(av[i]);
    if (out.requires_grad()) {
        auto an = a.ptr();
        Node<T>* on = out.node();
        on->backward = [an, on] {
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * on->value[i];
        };
    }
    return out;
}

template <class T>
Tensor<T> log_(const Tensor<T>& a) {
    auto out = make_op(a.shape(), {a});
    const auto& av = a.val();
    auto& ov = out.val();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::log(av[i]);
    if (out.requires_grad()) {
        auto an = a.ptr();
        Node<T>* on = out.node();
        on->backward = [an, on] {
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] / an->value[i];
        };
    }
    return out;
}

template <class T>
Tensor<T> sqrt_(const Tensor<T>& a) {
    auto out = make_op(a.shape(), {a});
    const auto& av = a.val();
    auto& ov = out.val();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::sqrt(av[i]);
    if (out.requires_grad()) {
        auto an = a.ptr();
        Node<T>* on = out.node();
        on->backward = [an, on] {
            for (size_t i = 0; i < on->grad.size(); ++i)
                an->grad[i] += on->grad[i] * T(0.5) / on->value[i];
        };
    }
    return out;
}

template <class T>
Tensor<T> abs_(const Tensor<T>& a) {
    auto out = make_op(a.shape(), {a});
    const auto& av = a.val();
    auto& ov = out.val();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::abs(av[i]);
    if (out.requires_grad()) {
        auto an = a.ptr();
        Node<T>* on = out.node();
        // subgradient 0 at x == 0
        on->backward = [an, on] {
            for (size_t i = 0; i < on->grad.size(); ++i) {
                const T x = an->value[i];
                if (x > T(0))
                    an->grad[i] += on->grad[i];
                else if (x < T(0))
                    an->grad[i] -= on->grad[i];
            }
        };
    }
    return out;
}

template <class T>
Tensor<T> tanh_(const Tensor<T>& a) {
    auto out = make_op(a.shape(), {a});
    const auto& av = a.val();
    auto& ov = out.val();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::tanh(av[i]);
    if (out.requires_grad()) {
        auto an = a.ptr();
        Node<T>* on = out.node();
        on->backward = [an, on] {
            for (size_t i = 0; i < on->grad.size(); ++i)
                an->grad[i] += on->grad[i] * (T(1) - on->value[i] * on->value[i]);
        };
    }
    return out;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    auto out = make_op(a.shape(), {a});
    const auto& av = a.val();
    auto& ov = out.val();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = detail::stable_sigmoid(av[i]);
    if (out.requires_grad()) {
        auto an = a.ptr();
        Node<T>* on = out.node();
        on->backward = [an, on] {
            for (size_t i = 0; i < on->grad.size(); ++i)
                an->grad[i] += on->grad[i] * on->value[i] * (T(1) - on->value[i]);
        };
    }
    return out;
}

template <class T>
Tensor<T> silu(const Tensor<T>& a) {
    auto out = make_op(a.shape(), {a});
    const auto& av = a.val();
    auto& ov = out.val();
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * detail::stable_sigmoid(av[i]);
    if (out.requires_grad()) {
        auto an = a.ptr();
        Node<T>* on = out.node();
        on->backward = [an, on] {
            for (size_t i = 0; i < on->grad.size(); ++i) {
                const T s = detail::stable_sigmoid(an->value[i]);
                an->grad[i] += on->grad[i] * s * (T(1) + an->value[i] * (T(1) - s));
            }
        };
    }
    return out;
}

template <class T>
Tensor<T> softplus(const Tensor<T>& a) {
    auto out = make_op(a.shape(), {a});
    const auto& av = a.val();
    auto& ov = out.val();
    for (size_t i = 0; i < ov.size(); ++i) {
        const T x = av[i];
        ov[i] = std::max(x, T(0)) + std::log1p(detail::fexp(-std::abs(x)));
    }
    if (out.requires_grad()) {
        auto an = a.ptr();
        Node<T>* on = out.node();
        on->backward = [an, on] {
            for (size_t i = 0; i < on->grad.size(); ++i)
                an->grad[i] += on->grad[i] * detail::stable_sigmoid(an->value[i]);
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.ndim() == 2 && b.ndim() == 2,
            "matmul: need 2-D operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    require(a.dim(1) == b.dim(0),
            "matmul: inner dims differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    auto out = make_op(Shape{m, n}, {a, b});
    mm_ab(a.val().data(), b.val().data(), out.val().data(), m, k, n);
    if (out.requires_grad()) {
        auto an = a.ptr(), bn = b.ptr();
        Node<T>* on = out.node();
        on->backward = [an, bn, on, m, k, n] {
            if (an->requires_grad)
                mm_abt(on->grad.data(), bn->value.data(), an->grad.data(), m, n, k);
            if (bn->requires_grad)
                mm_atb(an->value.data(), on->grad.data(), bn->grad.data(), m, k, n);
        };
    }
    return out;
}

template <class T>
Tensor<T> transpose2d(const Tensor<T>& a) {
    require(a.ndim() == 2, "transpose2d: need 2-D, got " + shape_str(a.shape()));
    const int m = a.dim(0), n = a.dim(1);
    auto out = make_op(Shape{n, m}, {a});
    const auto& av = a.val();
    auto& ov = out.val();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ov[size_t(j) * m + i] = av[size_t(i) * n + j];
    if (out.requires_grad()) {
        auto an = a.ptr();
        Node<T>* on = out.node();
        on->backward = [an, on, m, n] {
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) an->grad[size_t(i) * n + j] += on->grad[size_t(j) * m + i];
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and row-vector broadcasts
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
    auto out = make_op(Shape{1}, {a});
    const auto& av = a.val();
    T s = 0;
    for (T v : av) s += v;
    out.val()[0] = s;
    if (out.requires_grad()) {
        auto an = a.ptr();
        Node<T>* on = out.node();
        on->backward = [an, on] {
            const T g = on->grad[0];
            for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
        };
    }
    return out;
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
    require(a.size() > 0, "mean_all: empty tensor");
    auto out = make_op(Shape{1}, {a});
    const auto& av = a.val();
    T s = 0;
    for (T v : av) s += v;
    const T inv = T(1) / T(av.size());
    out.val()[0] = s * inv;
    if (out.requires_grad()) {
        auto an = a.ptr();
        Node<T>* on = out.node();
        on->backward = [an, on, inv] {
            const T g = on->grad[0] * inv;
            for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
        };
    }
    return out;
}

template <class T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
    require(x.ndim() == 2 && v.ndim() == 1 && x.dim(1) == v.dim(0),
            "add_rowvec: want [T,D] + [D], got " + shape_str(x.shape()) + " and " + shape_str(v.shape()));
    const int t = x.dim(0), d = x.dim(1);
    auto out = make_op(x.shape(), {x, v});
    const auto &xv = x.val(), &vv = v.val();
    auto& ov = out.val();
    for (int i = 0; i < t; ++i)
        for (int j = 0; j < d; ++j) ov[size_t(i) * d + j] = xv[size_t(i) * d + j] + vv[size_t(j)];
    if (out.requires_grad()) {
        auto xn = x.ptr(), vn = v.ptr();
        Node<T>* on = out.node();
        on->backward = [xn, vn, on, t, d] {
            if (xn->requires_grad)
                for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
            if (vn->requires_grad)
                for (int i = 0; i < t; ++i)
                    for (int j = 0; j < d; ++j) vn->grad[size_t(j)] += on->grad[size_t(i) * d + j];
        };
    }
    return out;
}

template <class T>
Tensor<T> mul_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
    require(x.ndim() == 2 && v.ndim() == 1 && x.dim(1) == v.dim(0),
            "mul_rowvec: want [T,D] * [D], got " + shape_str(x.shape()) + " and " + shape_str(v.shape()));
    const int t = x.dim(0), d = x.dim(1);
    auto out = make_op(x.shape(), {x, v});
    const auto &xv = x.val(), &vv = v.val();
    auto& ov = out.val();
    for (int i = 0; i < t; ++i)
        for (int j = 0; j < d; ++j) ov[size_t(i) * d + j] = xv[size_t(i) * d + j] * vv[size_t(j)];
    if (out.requires_grad()) {
        auto xn = x.ptr(), vn = v.ptr();
        Node<T>* on = out.node();
        on->backward = [xn, vn, on, t, d] {
            for (int i = 0; i < t; ++i)
                for (int j = 0; j < d; ++j) {
                    const size_t o = size_t(i) * d + j;
                    if (xn->requires_grad) xn->grad[o] += on->grad[o] * vn->value[size_t(j)];
                    if (vn->requires_grad) vn->grad[size_t(j)] += on->grad[o] * xn->value[o];
                }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Row-wise softmax and layer norm
// ---------------------------------------------------------------------------

// softmax(x/tau) per row, max-subtracted. tau > 0.
template <class T>
Tensor<T> softmax_rows(const Tensor<T>& x, double tau = 1.0) {
    require(x.ndim() == 2, "softmax_rows: need [T,N], got " + shape_str(x.shape()));
    require(tau > 0.0, "softmax_rows: tau must be > 0, got " + std::to_string(tau));
    const int t = x.dim(0), n = x.dim(1);
    auto out = make_op(x.shape(), {x});
    const auto& xv = x.val();
    auto& ov = out.val();
    const T itau = T(1.0 / tau);
    for (int i = 0; i < t; ++i) {
        const T* row = xv.data() + size_t(i) * n;
        T* orow = ov.data() + size_t(i) * n;
        T mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        T z = 0;
        for (int j = 0; j < n; ++j) {
            orow[j] = detail::fexp((row[j] - mx) * itau);
            z += orow[j];
        }
        const T iz = T(1) / z;
        for (int j = 0; j < n; ++j) orow[j] *= iz;
    }
    if (out.requires_grad()) {
        auto xn = x.ptr();
        Node<T>* on = out.node();
        on->backward = [xn, on, t, n, itau] {
            for (int i = 0; i < t; ++i) {
                const T* y = on->value.data() + size_t(i) * n;
                const T* g = on->grad.data() + size_t(i) * n;
                T* gx = xn->grad.data() + size_t(i) * n;
                T dot = 0;
                for (int j = 0; j < n; ++j) dot += g[j] * y[j];
                for (int j = 0; j < n; ++j) gx[j] += (g[j] - dot) * y[j] * itau;
            }
        };
    }
    return out;
}

// Per-row normalization without affine parameters; modulation supplies
// scale/shift where needed.
template <class T>
Tensor<T> layer_norm_rows(const Tensor<T>& x, double eps = 1e-5) {
    require(x.ndim() == 2, "layer_norm_rows: need [T,D], got " + shape_str(x.shape()));
    const int t = x.dim(0), d = x.dim(1);
    auto out = make_op(x.shape(), {x});
    const auto& xv = x.val();
    auto& ov = out.val();
    std::vector<T> inv_std(static_cast<size_t>(t));
    for (int i = 0; i < t; ++i) {
        const T* row = xv.data() + size_t(i) * d;
        T* orow = ov.data() + size_t(i) * d;
        T mean = 0;
        for (int j = 0; j < d; ++j) mean += row[j];
        mean /= T(d);
        T var = 0;
        for (int j = 0; j < d; ++j) {
            const T c = row[j] - mean;
            var += c * c;
        }
        var /= T(d);
        const T istd = T(1) / std::sqrt(var + T(eps));
        inv_std[size_t(i)] = istd;
        for (int j = 0; j < d; ++j) orow[j] = (row[j] - mean) * istd;
    }
    if (out.requires_grad()) {
        auto xn = x.ptr();
        Node<T>* on = out.node();
        on->backward = [xn, on, t, d, inv_std = std::move(inv_std)] {
            for (int i = 0; i < t; ++i) {
                const T* y = on->value.data() + size_t(i) * d;
                const T* g = on->grad.data() + size_t(i) * d;
                T* gx = xn->grad.data() + size_t(i) * d;
                T gmean = 0, gymean = 0;
                for (int j = 0; j < d; ++j) {
                    gmean += g[j];
                    gymean += g[j] * y[j];
                }
                gmean /= T(d);
                gymean /= T(d);
                const T istd = inv_std[size_t(i)];
                for (int j = 0; j < d; ++j) gx[j] += istd * (g[j] - gmean - y[j] * gymean);
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    require(shape_size(shape) == a.size(),
            "reshape: size mismatch " + shape_str(a.shape()) + " -> " + shape_str(shape));
    auto out = make_op(std::move(shape), {a});
    out.val() = a.val();
    if (out.requires_grad()) {
        auto an = a.ptr();
        Node<T>* on = out.node();
        on->backward = [an, on] {
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
        };
    }
    return out;
}

template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    require(!parts.empty(), "concat_rows: no inputs");
    Shape tail = parts[0].shape();
    int64_t rows = 0;
    for (const auto& p : parts) {
        require(p.ndim() == int(tail.size()), "concat_rows: rank mismatch");
        for (size_t i = 1; i < tail.size(); ++i)
            require(p.shape()[i] == tail[i], "concat_rows: trailing dims differ, " +
                                                 shape_str(p.shape()) + " vs " + shape_str(tail));
        rows += p.dim(0);
    }
    Shape out_shape = tail;
    out_shape[0] = int(rows);
    auto out = make_op(std::move(out_shape), parts);
    auto& ov = out.val();
    size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.val().begin(), p.val().end(), ov.begin() + off);
        off += p.val().size();
    }
    if (out.requires_grad()) {
        std::vector<std::shared_ptr<Node<T>>> ns;
        for (const auto& p : parts) ns.push_back(p.ptr());
        Node<T>* on = out.node();
        on->backward = [ns, on] {
            size_t off2 = 0;
            for (const auto& n : ns) {
                if (n->requires_grad)
                    for (size_t i = 0; i < n->value.size(); ++i) n->grad[i] += on->grad[off2 + i];
                off2 += n->value.size();
            }
        };
    }
    return out;
}

template <class T>
Tensor<T> slice_rows(const Tensor<T>& a, int begin, int end) {
    require(a.ndim() >= 1 && begin >= 0 && end <= a.dim(0) && begin < end,
            "slice_rows: bad range [" + std::to_string(begin) + "," + std::to_string(end) +
                ") for " + shape_str(a.shape()));
    Shape out_shape = a.shape();
    out_shape[0] = end - begin;
    const size_t row = size_t(a.size() / a.dim(0));
    auto out = make_op(std::move(out_shape), {a});
    const auto& av = a.val();
    std::copy(av.begin() + size_t(begin) * row, av.begin() + size_t(end) * row, out.val().begin());
    if (out.requires_grad()) {
        auto an = a.ptr();
        Node<T>* on = out.node();
        on->backward = [an, on, begin, row] {
            const size_t base = size_t(begin) * row;
            for (size_t i = 0; i < on->grad.size(); ++i) an->grad[base + i] += on->grad[i];
        };
    }
    return out;
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, int begin, int end) {
    require(a.ndim() == 2, "slice_cols: need 2-D, got " + shape_str(a.shape()));
    require(begin >= 0 && end <= a.dim(1) && begin < end,
            "slice_cols: bad range [" + std::to_string(begin) + "," + std::to_string(end) +
                ") for " + shape_str(a.shape()));
    const int t = a.dim(0), d = a.dim(1), w = end - begin;
    auto out = make_op(Shape{t, w}, {a});
    const auto& av = a.val();
    auto& ov = out.val();
    for (int i = 0; i < t; ++i)
        for (int j = 0; j < w; ++j) ov[size_t(i) * w + j] = av[size_t(i) * d + begin + j];
    if (out.requires_grad()) {
        auto an = a.ptr();
        Node<T>* on = out.node();
        on->backward = [an, on, t, d, w, begin] {
            for (int i = 0; i < t; ++i)
                for (int j = 0; j < w; ++j)
                    an->grad[size_t(i) * d + begin + j] += on->grad[size_t(i) * w + j];
        };
    }
    return out;
}

template <class T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
    require(!parts.empty(), "concat_cols: no inputs");
    const int t = parts[0].dim(0);
    int total = 0;
    for (const auto& p : parts) {
        require(p.ndim() == 2 && p.dim(0) == t,
                "concat_cols: row counts differ, " + shape_str(p.shape()));
        total += p.dim(1);
    }
    auto out = make_op(Shape{t, total}, parts);
    auto& ov = out.val();
    int col = 0;
    for (const auto& p : parts) {
        const int d = p.dim(1);
        const auto& pv = p.val();
        for (int i = 0; i < t; ++i)
            for (int j = 0; j < d; ++j) ov[size_t(i) * total + col + j] = pv[size_t(i) * d + j];
        col += d;
    }
    if (out.requires_grad()) {
        std::vector<std::shared_ptr<Node<T>>> ns;
        for (const auto& p : parts) ns.push_back(p.ptr());
        Node<T>* on = out.node();
        on->backward = [ns, on, t, total] {
            int col2 = 0;
            for (const auto& n : ns) {
                const int d = n->shape[1];
                if (n->requires_grad)
                    for (int i = 0; i < t; ++i)
                        for (int j = 0; j < d; ++j)
                            n->grad[size_t(i) * d + j] += on->grad[size_t(i) * total + col2 + j];
                col2 += d;
            }
        };
    }
    return out;
}

// [C,H,W] -> [H*W, C]; token order is raster scan.
template <class T>
Tensor<T> chw_to_tokens(const Tensor<T>& a) {
    require(a.ndim() == 3, "chw_to_tokens: need [C,H,W], got " + shape_str(a.shape()));
    const int c = a.dim(0), h = a.dim(1), w = a.dim(2);
    auto out = make_op(Shape{h * w, c}, {a});
    const auto& av = a.val();
    auto& ov = out.val();
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < h * w; ++i) ov[size_t(i) * c + ch] = av[size_t(ch) * h * w + i];
    if (out.requires_grad()) {
        auto an = a.ptr();
        Node<T>* on = out.node();
        on->backward = [an, on, c, h, w] {
            for (int ch = 0; ch < c; ++ch)
                for (int i = 0; i < h * w; ++i)
                    an->grad[size_t(ch) * h * w + i] += on->grad[size_t(i) * c + ch];
        };
    }
    return out;
}

template <class T>
Tensor<T> tokens_to_chw(const Tensor<T>& a, int h, int w) {
    require(a.ndim() == 2, "tokens_to_chw: need [N,C], got " + shape_str(a.shape()));
    require(a.dim(0) == h * w, "tokens_to_chw: token count " + std::to_string(a.dim(0)) +
                                   " != " + std::to_string(h) + "*" + std::to_string(w));
    const int c = a.dim(1);
    auto out = make_op(Shape{c, h, w}, {a});
    const auto& av = a.val();
    auto& ov = out.val();
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < h * w; ++i) ov[size_t(ch) * h * w + i] = av[size_t(i) * c + ch];
    if (out.requires_grad()) {
        auto an = a.ptr();
        Node<T>* on = out.node();
        on->backward = [an, on, c, h, w] {
            for (int ch = 0; ch < c; ++ch)
                for (int i = 0; i < h * w; ++i)
                    an->grad[size_t(i) * c + ch] += on->grad[size_t(ch) * h * w + i];
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                 int pad) {
    require(x.ndim() == 3, "conv2d: input must be [Ci,H,W], got " + shape_str(x.shape()));
    require(w.ndim() == 4, "conv2d: weight must be [Co,Ci,kh,kw], got " + shape_str(w.shape()));
    require(b.ndim() == 1 && b.dim(0) == w.dim(0),
            "conv2d: bias " + shape_str(b.shape()) + " does not match Co=" + std::to_string(w.dim(0)));
    require(x.dim(0) == w.dim(1), "conv2d: channel mismatch, input " + shape_str(x.shape()) +
                                      " weight " + shape_str(w.shape()));
    require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
    const int ci = x.dim(0), h = x.dim(1), ww = x.dim(2);
    const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int ho = conv_out_extent(h, kh, stride, pad), wo = conv_out_extent(ww, kw, stride, pad);
    require(ho >= 1 && wo >= 1, "conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                                    " too large for input " + shape_str(x.shape()));
    const int ck = ci * kh * kw, hw = ho * wo;

    auto out = make_op(Shape{co, ho, wo}, {x, w, b});
    {
        std::vector<T> col(size_t(ck) * hw);
        im2col(x.val().data(), ci, h, ww, kh, kw, stride, pad, ho, wo, col.data());
        mm_ab(w.val().data(), col.data(), out.val().data(), co, ck, hw);
        auto& ov = out.val();
        const auto& bv = b.val();
        for (int c = 0; c < co; ++c) {
            const T bias = bv[size_t(c)];
            T* plane = ov.data() + size_t(c) * hw;
            for (int i = 0; i < hw; ++i) plane[i] += bias;
        }
    }
    if (out.requires_grad()) {
        auto xn = x.ptr(), wn = w.ptr(), bn = b.ptr();
        Node<T>* on = out.node();
        on->backward = [xn, wn, bn, on, ci, h, ww, co, kh, kw, stride, pad, ho, wo, ck, hw] {
            if (bn->requires_grad) {
                for (int c = 0; c < co; ++c) {
                    const T* plane = on->grad.data() + size_t(c) * hw;
                    T s = 0;
                    for (int i = 0; i < hw; ++i) s += plane[i];
                    bn->grad[size_t(c)] += s;
                }
            }
            if (wn->requires_grad) {
                // col is recomputed rather than cached: backward trades a
                // copy for not holding Ci*k^2*HoWo floats per conv node.
                std::vector<T> col(size_t(ck) * hw);
                im2col(xn->value.data(), ci, h, ww, kh, kw, stride, pad, ho, wo, col.data());
                mm_abt(on->grad.data(), col.data(), wn->grad.data(), co, hw, ck);
            }
            if (xn->requires_grad) {
                std::vector<T> gcol(size_t(ck) * hw, T(0));
                mm_atb(wn->value.data(), on->grad.data(), gcol.data(), co, ck, hw);
                col2im(gcol.data(), ci, h, ww, kh, kw, stride, pad, ho, wo, xn->grad.data());
            }
        };
    }
    return out;
}

// Adjoint geometry of conv2d with the same stride/pad: out extent is
// s*(in-1)+k-2p. Weight layout [Ci,Co,kh,kw].
template <class T>
Tensor<T> conv2d_transpose(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                           int pad) {
    require(x.ndim() == 3, "conv2d_transpose: input must be [Ci,H,W], got " + shape_str(x.shape()));
    require(w.ndim() == 4,
            "conv2d_transpose: weight must be [Ci,Co,kh,kw], got " + shape_str(w.shape()));
    require(x.dim(0) == w.dim(0), "conv2d_transpose: channel mismatch, input " +
                                      shape_str(x.shape()) + " weight " + shape_str(w.shape()));
    require(b.ndim() == 1 && b.dim(0) == w.dim(1),
            "conv2d_transpose: bias " + shape_str(b.shape()) +
                " does not match Co=" + std::to_string(w.dim(1)));
    require(stride >= 1 && pad >= 0, "conv2d_transpose: bad stride/pad");
    const int ci = x.dim(0), hi = x.dim(1), wi = x.dim(2);
    const int co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const int ho = stride * (hi - 1) + kh - 2 * pad, wo = stride * (wi - 1) + kw - 2 * pad;
    require(ho >= 1 && wo >= 1, "conv2d_transpose: degenerate output for input " +
                                    shape_str(x.shape()));
    const int ck = co * kh * kw, hw = hi * wi;

    auto out = make_op(Shape{co, ho, wo}, {x, w, b});
    {
        std::vector<T> col(size_t(ck) * hw, T(0));
        mm_atb(w.val().data(), x.val().data(), col.data(), ci, ck, hw);
        col2im(col.data(), co, ho, wo, kh, kw, stride, pad, hi, wi, out.val().data());
        auto& ov = out.val();
        const auto& bv = b.val();
        for (int c = 0; c < co; ++c) {
            const T bias = bv[size_t(c)];
            T* plane = ov.data() + size_t(c) * ho * wo;
            for (int i = 0; i < ho * wo; ++i) plane[i] += bias;
        }
    }
    if (out.requires_grad()) {
        auto xn = x.ptr(), wn = w.ptr(), bn = b.ptr();
        Node<T>* on = out.node();
        on->backward = [xn, wn, bn, on, ci, hi, wi, co, kh, kw, stride, pad, ho, wo, ck, hw] {
            if (bn->requires_grad) {
                for (int c = 0; c < co; ++c) {
                    const T* plane = on->grad.data() + size_t(c) * ho * wo;
                    T s = 0;
                    for (int i = 0; i < ho * wo; ++i) s += plane[i];
                    bn->grad[size_t(c)] += s;
                }
            }
            if (xn->requires_grad || wn->requires_grad) {
                std::vector<T> gcol(size_t(ck) * hw);
                im2col(on->grad.data(), co, ho, wo, kh, kw, stride, pad, hi, wi, gcol.data());
                if (xn->requires_grad)
                    mm_ab(wn->value.data(), gcol.data(), xn->grad.data(), ci, ck, hw);
                if (wn->requires_grad)
                    mm_abt(xn->value.data(), gcol.data(), wn->grad.data(), ci, hw, ck);
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Resizing. Downsampling is area mean (integer factors); upsampling is
// nearest or bilinear (half-pixel centers, edge clamp). Same-size calls are
// exact copies in every mode.
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int th, int tw) {
    require(x.ndim() == 3, "upsample_nearest: need [C,H,W], got " + shape_str(x.shape()));
    require(th >= x.dim(1) && tw >= x.dim(2),
            "upsample_nearest: target " + std::to_string(th) + "x" + std::to_string(tw) +
                " smaller than input " + shape_str(x.shape()));
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    auto out = make_op(Shape{c, th, tw}, {x});
    const auto& xv = x.val();
    auto& ov = out.val();
    std::vector<int> ys(static_cast<size_t>(th)), xs(static_cast<size_t>(tw));
    for (int i = 0; i < th; ++i) ys[size_t(i)] = std::min(h - 1, i * h / th);
    for (int j = 0; j < tw; ++j) xs[size_t(j)] = std::min(w - 1, j * w / tw);
    for (int ch = 0; ch < c; ++ch) {
        const T* src = xv.data() + size_t(ch) * h * w;
        T* dst = ov.data() + size_t(ch) * th * tw;
        for (int i = 0; i < th; ++i)
            for (int j = 0; j < tw; ++j) dst[size_t(i) * tw + j] = src[size_t(ys[size_t(i)]) * w + xs[size_t(j)]];
    }
    if (out.requires_grad()) {
        auto xn = x.ptr();
        Node<T>* on = out.node();
        on->backward = [xn, on, c, h, w, th, tw, ys = std::move(ys), xs = std::move(xs)] {
            for (int ch = 0; ch < c; ++ch) {
                T* gsrc = xn->grad.data() + size_t(ch) * h * w;
                const T* gdst = on->grad.data() + size_t(ch) * th * tw;
                for (int i = 0; i < th; ++i)
                    for (int j = 0; j < tw; ++j)
                        gsrc[size_t(ys[size_t(i)]) * w + xs[size_t(j)]] += gdst[size_t(i) * tw + j];
            }
        };
    }
    return out;
}

template <class T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int th, int tw) {
    require(x.ndim() == 3, "upsample_bilinear: need [C,H,W], got " + shape_str(x.shape()));
    require(th >= x.dim(1) && tw >= x.dim(2),
            "upsample_bilinear: target " + std::to_string(th) + "x" + std::to_string(tw) +
                " smaller than input " + shape_str(x.shape()));
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    struct Tap {
        int lo, hi;
        T frac;
    };
    std::vector<Tap> ty(static_cast<size_t>(th)), tx(static_cast<size_t>(tw));
    auto fill = [](std::vector<Tap>& taps, int target, int src) {
        for (int i = 0; i < target; ++i) {
            double pos = (double(i) + 0.5) * double(src) / double(target) - 0.5;
            pos = std::clamp(pos, 0.0, double(src - 1));
            const int lo = int(pos);
            taps[size_t(i)] = {lo, std::min(lo + 1, src - 1), T(pos - double(lo))};
        }
    };
    fill(ty, th, h);
    fill(tx, tw, w);
    auto out = make_op(Shape{c, th, tw}, {x});
    const auto& xv = x.val();
    auto& ov = out.val();
    for (int ch = 0; ch < c; ++ch) {
        const T* src = xv.data() + size_t(ch) * h * w;
        T* dst = ov.data() + size_t(ch) * th * tw;
        for (int i = 0; i < th; ++i) {
            const Tap& ay = ty[size_t(i)];
            for (int j = 0; j < tw; ++j) {
                const Tap& ax = tx[size_t(j)];
                // lerp form keeps constant fields exact
                const T top = src[size_t(ay.lo) * w + ax.lo] +
                              ax.frac * (src[size_t(ay.lo) * w + ax.hi] - src[size_t(ay.lo) * w + ax.lo]);
                const T bot = src[size_t(ay.hi) * w + ax.lo] +
                              ax.frac * (src[size_t(ay.hi) * w + ax.hi] - src[size_t(ay.hi) * w + ax.lo]);
                dst[size_t(i) * tw + j] = top + ay.frac * (bot - top);
            }
        }
    }
    if (out.requires_grad()) {
        auto xn = x.ptr();
        Node<T>* on = out.node();
        on->backward = [xn, on, c, h, w, th, tw, ty = std::move(ty), tx = std::move(tx)] {
            for (int ch = 0; ch < c; ++ch) {
                T* g = xn->grad.data() + size_t(ch) * h * w;
                const T* go = on->grad.data() + size_t(ch) * th * tw;
                for (int i = 0; i < th; ++i) {
                    const Tap& ay = ty[size_t(i)];
                    for (int j = 0; j < tw; ++j) {
                        const Tap& ax = tx[size_t(j)];
                        const T gv = go[size_t(i) * tw + j];
                        const T wy1 = ay.frac, wy0 = T(1) - ay.frac;
                        const T wx1 = ax.frac, wx0 = T(1) - ax.frac;
                        g[size_t(ay.lo) * w + ax.lo] += gv * wy0 * wx0;
                        g[size_t(ay.lo) * w + ax.hi] += gv * wy0 * wx1;
                        g[size_t(ay.hi) * w + ax.lo] += gv * wy1 * wx0;
                        g[size_t(ay.hi) * w + ax.hi] += gv * wy1 * wx1;
                    }
                }
            }
        };
    }
    return out;
}

template <class T>
Tensor<T> downsample_area(const Tensor<T>& x, int th, int tw) {
    require(x.ndim() == 3, "downsample_area: need [C,H,W], got " + shape_str(x.shape()));
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    require(th >= 1 && tw >= 1 && th <= h && tw <= w,
            "downsample_area: target " + std::to_string(th) + "x" + std::to_string(tw) +
                " not below input " + shape_str(x.shape()));
    require(h % th == 0 && w % tw == 0,
            "downsample_area: target " + std::to_string(th) + "x" + std::to_string(tw) +
                " must divide input " + shape_str(x.shape()));
    const int bh = h / th, bw = w / tw;
    const T inv = T(1) / T(bh * bw);
    auto out = make_op(Shape{c, th, tw}, {x});
    const auto& xv = x.val();
    auto& ov = out.val();
    for (int ch = 0; ch < c; ++ch) {
        const T* src = xv.data() + size_t(ch) * h * w;
        T* dst = ov.data() + size_t(ch) * th * tw;
        for (int i = 0; i < th; ++i)
            for (int j = 0; j < tw; ++j) {
                T s = 0;
                for (int di = 0; di < bh; ++di)
                    for (int dj = 0; dj < bw; ++dj) s += src[size_t(i * bh + di) * w + j * bw + dj];
                dst[size_t(i) * tw + j] = s * inv;
            }
    }
    if (out.requires_grad()) {
        auto xn = x.ptr();
        Node<T>* on = out.node();
        on->backward = [xn, on, c, h, w, th, tw, bh, bw, inv] {
            for (int ch = 0; ch < c; ++ch) {
                T* g = xn->grad.data() + size_t(ch) * h * w;
                const T* go = on->grad.data() + size_t(ch) * th * tw;
                for (int i = 0; i < th; ++i)
                    for (int j = 0; j < tw; ++j) {
                        const T gv = go[size_t(i) * tw + j] * inv;
                        for (int di = 0; di < bh; ++di)
                            for (int dj = 0; dj < bw; ++dj)
                                g[size_t(i * bh + di) * w + j * bw + dj] += gv;
                    }
            }
        };
    }
    return out;
}

enum class ResizeMode { nearest, bilinear, area };

// Dispatcher used by the tokenizer: area for shrinking, nearest/bilinear for
// growing. Same size in = copy out, all modes.
template <class T>
Tensor<T> resize(const Tensor<T>& x, int th, int tw, ResizeMode mode) {
    require(x.ndim() == 3, "resize: need [C,H,W], got " + shape_str(x.shape()));
    const int h = x.dim(1), w = x.dim(2);
    if (th == h && tw == w) {
        switch (mode) {
            case ResizeMode::nearest: return upsample_nearest(x, th, tw);
            case ResizeMode::bilinear: return upsample_bilinear(x, th, tw);
            case ResizeMode::area: return downsample_area(x, th, tw);
        }
    }
    if (th <= h && tw <= w) {
        require(mode == ResizeMode::area,
                "resize: shrinking " + shape_str(x.shape()) + " to " + std::to_string(th) + "x" +
                    std::to_string(tw) + " requires area mode");
        return downsample_area(x, th, tw);
    }
    require(th >= h && tw >= w, "resize: mixed grow/shrink unsupported for " + shape_str(x.shape()));
    require(mode != ResizeMode::area, "resize: growing requires nearest or bilinear mode");
    return mode == ResizeMode::nearest ? upsample_nearest(x, th, tw) : upsample_bilinear(x, th, tw);
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

// [C,H,W] -> [1,C] channel means (global average pool).
template <class T>
Tensor<T> mean_spatial(const Tensor<T>& x) {
    require(x.ndim() == 3, "mean_spatial: need [C,H,W], got " + shape_str(x.shape()));
    const int c = x.dim(0), hw = x.dim(1) * x.dim(2);
    const T inv = T(1) / T(hw);
    auto out = make_op(Shape{1, c}, {x});
    const auto& xv = x.val();
    auto& ov = out.val();
    for (int ch = 0; ch < c; ++ch) {
        T s = 0;
        const T* plane = xv.data() + size_t(ch) * hw;
        for (int i = 0; i < hw; ++i) s += plane[i];
        ov[size_t(ch)] = s * inv;
    }
    if (out.requires_grad()) {
        auto xn = x.ptr();
        Node<T>* on = out.node();
        on->backward = [xn, on, c, hw, inv] {
            for (int ch = 0; ch < c; ++ch) {
                const T g = on->grad[size_t(ch)] * inv;
                T* plane = xn->grad.data() + size_t(ch) * hw;
                for (int i = 0; i < hw; ++i) plane[i] += g;
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Graph control and lookup ops
// ---------------------------------------------------------------------------

// Value copy with no parents: blocks gradient flow entirely.
template <class T>
Tensor<T> detach(const Tensor<T>& a) {
    auto out = Tensor<T>::interior(a.shape());
    out.val() = a.val();
    return out;
}

namespace detail {
// Nearest row of z[V,C] to f (squared distance); exact ties resolve to the
// lowest index via strict comparison.
template <class T>
inline int nearest_row(const T* f, const T* z, int v, int c) {
    int best = 0;
    T best_d = 0;
    for (int j = 0; j < c; ++j) {
        const T d = f[j] - z[j];
        best_d += d * d;
    }
    for (int i = 1; i < v; ++i) {
        const T* row = z + size_t(i) * c;
        T d2 = 0;
        for (int j = 0; j < c; ++j) {
            const T d = f[j] - row[j];
            d2 += d * d;
        }
        if (d2 < best_d) {
            best_d = d2;
            best = i;
        }
    }
    return best;
}
}  // namespace detail

template <class T>
std::vector<int> nearest_code(const Tensor<T>& f, const Tensor<T>& z) {
    require(f.ndim() == 2 && z.ndim() == 2 && f.dim(1) == z.dim(1),
            "nearest_code: want f[N,C], z[V,C]; got " + shape_str(f.shape()) + " and " +
                shape_str(z.shape()));
    const int n = f.dim(0), v = z.dim(0), c = z.dim(1);
    std::vector<int> idx(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        idx[size_t(i)] = detail::nearest_row(f.val().data() + size_t(i) * c, z.val().data(), v, c);
    return idx;
}

// Straight-through lookup: forward substitutes the nearest codebook row,
// backward passes the output gradient to f unchanged and nothing to z.
template <class T>
Tensor<T> ste_nearest_lookup(const Tensor<T>& f, const Tensor<T>& z) {
    const std::vector<int> idx = nearest_code(f, z);
    const int n = f.dim(0), c = f.dim(1);
    auto out = make_op(f.shape(), {f, z});
    const auto& zv = z.val();
    auto& ov = out.val();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) ov[size_t(i) * c + j] = zv[size_t(idx[size_t(i)]) * c + j];
    if (out.requires_grad()) {
        auto fn = f.ptr();
        Node<T>* on = out.node();
        on->backward = [fn, on] {
            if (fn->requires_grad)
                for (size_t i = 0; i < on->grad.size(); ++i) fn->grad[i] += on->grad[i];
        };
    }
    return out;
}

// Hard argmax lookup. Output is piecewise constant in both inputs, so the
// node is built without parents: gradients upstream of it are exactly zero.
template <class T>
Tensor<T> argmax_lookup(const Tensor<T>& logits, const Tensor<T>& z) {
    require(logits.ndim() == 2 && z.ndim() == 2 && logits.dim(1) == z.dim(0),
            "argmax_lookup: want logits[N,V], z[V,C]; got " + shape_str(logits.shape()) + " and " +
                shape_str(z.shape()));
    const int n = logits.dim(0), v = z.dim(0), c = z.dim(1);
    auto out = Tensor<T>::interior(Shape{n, c});
    const auto& lv = logits.val();
    const auto& zv = z.val();
    auto& ov = out.val();
    for (int i = 0; i < n; ++i) {
        const T* row = lv.data() + size_t(i) * v;
        int best = 0;
        for (int k = 1; k < v; ++k)
            if (row[k] > row[best]) best = k;
        for (int j = 0; j < c; ++j) ov[size_t(i) * c + j] = zv[size_t(best) * c + j];
    }
    return out;
}

// Row gather with fixed indices; differentiable to z by scatter-add.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& z, const std::vector<int>& idx) {
    require(z.ndim() == 2, "gather_rows: need [V,C], got " + shape_str(z.shape()));
    const int v = z.dim(0), c = z.dim(1);
    for (int i : idx)
        require(i >= 0 && i < v, "gather_rows: index " + std::to_string(i) + " out of [0," +
                                     std::to_string(v) + ")");
    const int n = int(idx.size());
    auto out = make_op(Shape{n, c}, {z});
    const auto& zv = z.val();
    auto& ov = out.val();
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j) ov[size_t(i) * c + j] = zv[size_t(idx[size_t(i)]) * c + j];
    if (out.requires_grad()) {
        auto zn = z.ptr();
        Node<T>* on = out.node();
        on->backward = [zn, on, idx, c] {
            for (size_t i = 0; i < idx.size(); ++i)
                for (int j = 0; j < c; ++j)
                    zn->grad[size_t(idx[i]) * c + j] += on->grad[i * size_t(c) + j];
        };
    }
    return out;
}

template <class T>
Tensor<T> l1_loss(const Tensor<T>& a, const Tensor<T>& b) {
    return mean_all(abs_(sub(a, b)));
}

template <class T>
Tensor<T> mse_loss(const Tensor<T>& a, const Tensor<T>& b) {
    auto d = sub(a, b);
    return mean_all(mul(d, d));
}

}  // namespace cyclevar
