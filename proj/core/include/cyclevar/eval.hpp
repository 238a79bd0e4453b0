#pragma once

#include <json.hpp>

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "cyclevar/generation.hpp"
#include "cyclevar/optim.hpp"
#include "cyclevar/synth.hpp"
#include "cyclevar/training.hpp"

namespace cyclevar {

struct MetricReport {
    double fid_proxy = 0;
    double struct_dist = 0;
    double domain_acc = 0;
    int n_images = 0;
};

struct BenchReport {
    std::string mode;
    int K = 0;
    double mean_s = 0;
    double std_s = 0;
    int forwards = 0;
};

namespace detail {

// cyclic Jacobi on a symmetric matrix; returns eigenvalues, overwrites m with
// garbage, fills vecs column-major (vecs[i*d+j] = component i of eigenvector j)
inline std::vector<double> sym_eig(std::vector<double> m, int d, std::vector<double>* vecs) {
    std::vector<double> v(size_t(d) * d, 0.0);
    for (int i = 0; i < d; ++i) v[size_t(i) * d + i] = 1.0;
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = 0;
        for (int p = 0; p < d; ++p)
            for (int q = p + 1; q < d; ++q) off += m[size_t(p) * d + q] * m[size_t(p) * d + q];
        if (off < 1e-24) break;
        for (int p = 0; p < d; ++p) {
            for (int q = p + 1; q < d; ++q) {
                const double apq = m[size_t(p) * d + q];
                if (std::fabs(apq) < 1e-300) continue;
                const double app = m[size_t(p) * d + p], aqq = m[size_t(q) * d + q];
                const double theta = (aqq - app) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (int k = 0; k < d; ++k) {
                    const double akp = m[size_t(k) * d + p], akq = m[size_t(k) * d + q];
                    m[size_t(k) * d + p] = c * akp - s * akq;
                    m[size_t(k) * d + q] = s * akp + c * akq;
                }
                for (int k = 0; k < d; ++k) {
                    const double apk = m[size_t(p) * d + k], aqk = m[size_t(q) * d + k];
                    m[size_t(p) * d + k] = c * apk - s * aqk;
                    m[size_t(q) * d + k] = s * apk + c * aqk;
                }
                for (int k = 0; k < d; ++k) {
                    const double vkp = v[size_t(k) * d + p], vkq = v[size_t(k) * d + q];
                    v[size_t(k) * d + p] = c * vkp - s * vkq;
                    v[size_t(k) * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    std::vector<double> evals(size_t(d), 0.0);
    for (int i = 0; i < d; ++i) evals[size_t(i)] = m[size_t(i) * d + i];
    if (vecs) *vecs = std::move(v);
    return evals;
}

// V diag(sqrt(max(lambda,0))) V^T
inline std::vector<double> sym_sqrt(const std::vector<double>& m, int d) {
    std::vector<double> vecs;
    auto evals = sym_eig(m, d, &vecs);
    for (auto& e : evals) e = std::sqrt(std::max(e, 0.0));
    std::vector<double> out(size_t(d) * d, 0.0);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
            double acc = 0;
            for (int k = 0; k < d; ++k)
                acc += vecs[size_t(i) * d + k] * evals[size_t(k)] * vecs[size_t(j) * d + k];
            out[size_t(i) * d + j] = acc;
        }
    return out;
}

inline std::vector<double> mat_mul(const std::vector<double>& a, const std::vector<double>& b,
                                   int d) {
    std::vector<double> out(size_t(d) * d, 0.0);
    for (int i = 0; i < d; ++i)
        for (int k = 0; k < d; ++k) {
            const double aik = a[size_t(i) * d + k];
            for (int j = 0; j < d; ++j) out[size_t(i) * d + j] += aik * b[size_t(k) * d + j];
        }
    return out;
}

// cosine with the single-sqrt denominator so cos(a,a) is exactly 1
inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 && nb == 0.0) return 1.0;
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / std::sqrt(na * nb);
}

}  // namespace detail

// Frechet distance between Gaussians fit to two feature sets, rows of length
// d. Covariances get +1e-6 I so a degenerate batch stays invertible.
inline double fid_from_features(const std::vector<double>& a, const std::vector<double>& b,
                                int d) {
    require(d >= 1 && a.size() % size_t(d) == 0 && b.size() % size_t(d) == 0,
            "fid_from_features: ragged feature rows");
    const int na = int(a.size()) / d, nb = int(b.size()) / d;
    require(na >= 2 && nb >= 2, "fid_from_features: need at least 2 rows per side");

    auto fit = [d](const std::vector<double>& rows, int n, std::vector<double>& mean) {
        mean.assign(size_t(d), 0.0);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) mean[size_t(j)] += rows[size_t(i) * d + j] / n;
        std::vector<double> cov(size_t(d) * d, 0.0);
        for (int i = 0; i < n; ++i)
            for (int p = 0; p < d; ++p) {
                const double cp = rows[size_t(i) * d + p] - mean[size_t(p)];
                for (int q = 0; q < d; ++q)
                    cov[size_t(p) * d + q] +=
                        cp * (rows[size_t(i) * d + q] - mean[size_t(q)]) / (n - 1);
            }
        for (int p = 0; p < d; ++p) cov[size_t(p) * d + p] += 1e-6;
        return cov;
    };

    std::vector<double> mu_a, mu_b;
    auto cov_a = fit(a, na, mu_a);
    auto cov_b = fit(b, nb, mu_b);

    double mean_term = 0, trace_term = 0;
    for (int j = 0; j < d; ++j) {
        const double md = mu_a[size_t(j)] - mu_b[size_t(j)];
        mean_term += md * md;
        trace_term += cov_a[size_t(j) * d + j] + cov_b[size_t(j) * d + j];
    }

    auto sb = detail::sym_sqrt(cov_b, d);
    auto mid = detail::mat_mul(detail::mat_mul(sb, cov_a, d), sb, d);
    // symmetrize away the matmul rounding before the final eigensolve
    for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j) {
            const double m = 0.5 * (mid[size_t(i) * d + j] + mid[size_t(j) * d + i]);
            mid[size_t(i) * d + j] = m;
            mid[size_t(j) * d + i] = m;
        }
    double tr_sqrt = 0;
    for (double e : detail::sym_eig(std::move(mid), d, nullptr))
        tr_sqrt += std::sqrt(std::max(e, 0.0));

    return std::max(mean_term + trace_term - 2.0 * tr_sqrt, 0.0);
}

// channel-pooled fixed-feature vector for one image
template <class T>
std::vector<double> metric_features(const PerceptualProxy<T>& px, const Tensor<T>& img) {
    NoGradGuard ng;
    auto f = px.features(img);
    const auto& sh = f.shape();
    require(sh.size() == 3, "metric_features: need a [C,h,w] map");
    const int C = sh[0], HW = sh[1] * sh[2];
    std::vector<double> out(size_t(C), 0.0);
    for (int c = 0; c < C; ++c) {
        double acc = 0;
        for (int i = 0; i < HW; ++i) acc += double(f.val()[size_t(c) * HW + i]);
        out[size_t(c)] = acc / HW;
    }
    return out;
}

template <class T>
double fid_proxy(const PerceptualProxy<T>& px, const std::vector<Tensor<T>>& real,
                 const std::vector<Tensor<T>>& gen) {
    require(real.size() >= 2 && gen.size() >= 2, "fid_proxy: need at least 2 images per side");
    std::vector<double> fa, fb;
    int d = 0;
    for (const auto& img : real) {
        auto f = metric_features(px, img);
        d = int(f.size());
        fa.insert(fa.end(), f.begin(), f.end());
    }
    for (const auto& img : gen) {
        auto f = metric_features(px, img);
        fb.insert(fb.end(), f.begin(), f.end());
    }
    return fid_from_features(fa, fb, d);
}

// 1 - cosine between the spatial self-similarity matrices of the two images'
// fixed-feature maps; 0 for identical images, bounded by [0,2]
template <class T>
double struct_dist(const PerceptualProxy<T>& px, const Tensor<T>& a, const Tensor<T>& b) {
    NoGradGuard ng;
    auto self_sim = [&px](const Tensor<T>& img) {
        auto f = px.features(img);
        const auto& sh = f.shape();
        const int C = sh[0], N = sh[1] * sh[2];
        std::vector<std::vector<double>> cols(size_t(N), std::vector<double>(size_t(C), 0.0));
        for (int i = 0; i < N; ++i)
            for (int c = 0; c < C; ++c) cols[size_t(i)][size_t(c)] = double(f.val()[size_t(c) * N + i]);
        std::vector<double> sim;
        sim.reserve(size_t(N) * N);
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < N; ++j) sim.push_back(detail::cosine(cols[size_t(i)], cols[size_t(j)]));
        return sim;
    };
    auto sa = self_sim(a), sb = self_sim(b);
    require(sa.size() == sb.size(), "struct_dist: image sizes differ");
    return 1.0 - detail::cosine(sa, sb);
}

// Tiny conv net deciding warm-vs-cool domain; pooled features into one logit.
// P(domain = y) = sigmoid(logit).
template <class T>
struct DomainClassifier {
    std::vector<ConvSpec<T>> layers;
    Tensor<T> head_w, head_b;

    static DomainClassifier make(Rng& rng, int base_channels = 8) {
        DomainClassifier c;
        auto conv = [&](int ci, int co) {
            ConvSpec<T> l;
            const double std = std::sqrt(2.0 / (double(ci) * 9));
            l.w = Tensor<T>::randn({co, ci, 3, 3}, rng, T(std));
            l.b = Tensor<T>::zeros({co});
            l.stride = 2;
            l.pad = 1;
            c.layers.push_back(l);
        };
        conv(3, base_channels);
        conv(base_channels, 2 * base_channels);
        c.head_w = Tensor<T>::randn({2 * base_channels, 1}, rng, T(0.1));
        c.head_b = Tensor<T>::zeros({1, 1});
        return c;
    }

    Tensor<T> logit(const Tensor<T>& img) const {
        Tensor<T> h = img;
        for (const auto& L : layers) h = silu(L.apply(h));
        const auto& sh = h.shape();
        const int C = sh[0], HW = sh[1] * sh[2];
        auto pooled = mul_scalar(matmul(reshape(h, {C, HW}), Tensor<T>::full({HW, 1}, T(1))),
                                 T(1) / T(HW));
        return add(matmul(reshape(pooled, {1, C}), head_w), head_b);
    }

    Domain predict(const Tensor<T>& img) const {
        NoGradGuard ng;
        return double(logit(img).val()[0]) > 0.0 ? Domain::y : Domain::x;
    }

    template <class Fn>
    void visit_params(Fn&& fn) {
        for (auto& L : layers) {
            fn(L.w);
            fn(L.b);
        }
        fn(head_w);
        fn(head_b);
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

struct ClassifierTrainConfig {
    int steps = 300;
    int batch = 16;
    double lr = 3e-3;
    uint64_t seed = 97;
    uint64_t holdout_offset = uint64_t(1) << 32;
    int holdout_n = 128;
};

template <class T>
struct ClassifierReport {
    DomainClassifier<T> clf;
    double holdout_acc = 0;
};

template <class T>
double domain_acc(const DomainClassifier<T>& clf, const std::vector<Tensor<T>>& images,
                  Domain claimed) {
    require(!images.empty(), "domain_acc: empty batch");
    int hits = 0;
    for (const auto& img : images)
        if (clf.predict(img) == claimed) ++hits;
    return double(hits) / double(images.size());
}

// logistic training on alternating warm/cool draws; images at even indices
// come from X, odd from Y, so every batch is balanced
template <class T>
ClassifierReport<T> train_domain_classifier(const SyntheticDomainSpec& spec,
                                            const ClassifierTrainConfig& cfg = {}) {
    Rng rng(cfg.seed, "domain-clf");
    ClassifierReport<T> rep;
    rep.clf = DomainClassifier<T>::make(rng);
    rep.clf.set_trainable(true);

    typename AdamW<T>::Config oc;
    oc.lr = cfg.lr;
    oc.weight_decay = 0.0;
    AdamW<T> opt(rep.clf.params(), oc);

    uint64_t cursor = 0;
    for (int s = 0; s < cfg.steps; ++s) {
        opt.zero_grad();
        for (int i = 0; i < cfg.batch; ++i, ++cursor) {
            const Domain dom = (cursor % 2 == 0) ? Domain::x : Domain::y;
            auto img = synth_image<T>(spec, dom, cursor / 2).image;
            auto z = rep.clf.logit(img);
            // -log sigmoid(z) for Y, -log(1-sigmoid(z)) for X
            auto loss = dom == Domain::y ? softplus(mul_scalar(z, T(-1))) : softplus(z);
            backward(mul_scalar(reshape(loss, {1}), T(1) / T(cfg.batch)));
        }
        opt.step();
    }

    int hits = 0;
    for (int i = 0; i < cfg.holdout_n; ++i) {
        const Domain dom = (i % 2 == 0) ? Domain::x : Domain::y;
        auto img = synth_image<T>(spec, dom, cfg.holdout_offset + uint64_t(i)).image;
        if (rep.clf.predict(img) == dom) ++hits;
    }
    rep.holdout_acc = double(hits) / double(cfg.holdout_n);
    return rep;
}

struct BenchConfig {
    int repeats = 10;
    int warmup = 3;
    GenerationConfig gen;   // mode field is overridden per run
};

struct BenchPair {
    BenchReport serial, parallel;
};

// Times only the generate phase (transformer + quantizer) on one shared
// context, serial with cache against the one-step parallel pass.
template <class T>
BenchPair bench_modes(const Generator<T>& gen, const Tensor<T>& image, const BenchConfig& cfg) {
    require(cfg.repeats >= 2 && cfg.warmup >= 0, "bench_modes: need at least 2 repeats");
    NoGradGuard ng;
    auto pyr = tokenize_multiscale(gen.vae.encode(image), gen.cb, gen.sched);
    auto F = build_context(pyr, gen.sched);
    const int K = gen.sched.K();

    auto run_mode = [&](GenerationConfig::Mode mode) {
        GenerationConfig gc = cfg.gen;
        gc.mode = mode;
        BenchReport rep;
        rep.mode = mode == GenerationConfig::Mode::serial ? "serial" : "parallel";
        rep.K = K;
        std::vector<double> secs;
        for (int i = 0; i < cfg.warmup + cfg.repeats; ++i) {
            detail::WallClock clock;
            auto state = generate(gen, F, Domain::y, gc);
            const double s = clock.ms() / 1000.0;
            if (i == 0)
                rep.forwards = state.forward_calls;
            else
                require(state.forward_calls == rep.forwards,
                        "bench_modes: forward count changed across repeats");
            if (i >= cfg.warmup) secs.push_back(s);
        }
        double mean = 0;
        for (double s : secs) mean += s / double(secs.size());
        double var = 0;
        for (double s : secs) var += (s - mean) * (s - mean) / double(secs.size() - 1);
        rep.mean_s = mean;
        rep.std_s = std::sqrt(var);
        return rep;
    };

    BenchPair pair;
    pair.serial = run_mode(GenerationConfig::Mode::serial);
    pair.parallel = run_mode(GenerationConfig::Mode::parallel);
    return pair;
}

inline nlohmann::json to_json(const MetricReport& r) {
    return nlohmann::json{{"fid_proxy", r.fid_proxy},
                          {"struct_dist", r.struct_dist},
                          {"domain_acc", r.domain_acc},
                          {"n_images", r.n_images}};
}

inline nlohmann::json to_json(const BenchReport& r) {
    return nlohmann::json{{"mode", r.mode},
                          {"K", r.K},
                          {"mean_s", r.mean_s},
                          {"std_s", r.std_s},
                          {"forwards", r.forwards}};
}

inline std::string bench_csv_header() { return "mode,K,mean_s,std_s,forwards"; }

inline std::string bench_csv_row(const BenchReport& r) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%s,%d,%.6f,%.6f,%d", r.mode.c_str(), r.K, r.mean_s, r.std_s,
                  r.forwards);
    return std::string(buf);
}

}  // namespace cyclevar
