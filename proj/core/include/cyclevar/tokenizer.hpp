#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cyclevar/common.hpp"
#include "cyclevar/ops.hpp"
#include "cyclevar/optim.hpp"
#include "cyclevar/quantizer.hpp"
#include "cyclevar/rng.hpp"
#include "cyclevar/tensor.hpp"

namespace cyclevar {

// Images are [3,H,W] tensors with values in [0,1] at I/O boundaries.
template <class T>
using ImageTensor = Tensor<T>;

struct ScaleSchedule {
    std::vector<std::array<int, 2>> sizes;  // (h_k, w_k), coarse to fine
    ResizeMode up_mode = ResizeMode::bilinear;
    ResizeMode down_mode = ResizeMode::area;

    int K() const { return int(sizes.size()); }

    // strictly increasing areas, finest scale equal to the latent extent
    void validate(int h, int w) const {
        require(!sizes.empty(), "ScaleSchedule: empty");
        int prev_area = 0;
        for (const auto& s : sizes) {
            require(s[0] >= 1 && s[1] >= 1, "ScaleSchedule: extents must be >= 1");
            const int area = s[0] * s[1];
            require(area > prev_area, "ScaleSchedule: areas must strictly increase");
            prev_area = area;
        }
        require(sizes.back()[0] == h && sizes.back()[1] == w,
                "ScaleSchedule: last scale " + std::to_string(sizes.back()[0]) + "x" +
                    std::to_string(sizes.back()[1]) + " != latent " + std::to_string(h) + "x" +
                    std::to_string(w));
    }

    // (1,1),(2,2),(4,4),...,(n,n) for a power-of-two square latent
    static ScaleSchedule pow2_square(int n) {
        require(n >= 1 && (n & (n - 1)) == 0, "ScaleSchedule: latent extent must be a power of two");
        ScaleSchedule out;
        for (int s = 1; s < n; s <<= 1) out.sizes.push_back({s, s});
        out.sizes.push_back({n, n});
        return out;
    }
};

template <class T>
struct ConvSpec {
    Tensor<T> w, b;
    int stride = 1;
    int pad = 0;
    bool transposed = false;

    Tensor<T> apply(const Tensor<T>& x) const {
        return transposed ? conv2d_transpose(x, w, b, stride, pad) : conv2d(x, w, b, stride, pad);
    }
};

// Small conv VAE: strided SiLU encoder to a [C,h,w] latent, mirrored transposed
// decoder ending in a sigmoid so outputs live in (0,1).
template <class T>
struct Vae {
    int image_size = 32;
    int latent_size = 8;
    int latent_channels = 16;
    int base_channels = 32;
    std::vector<ConvSpec<T>> enc, dec;

    static Vae make(int image_size, int latent_size, int latent_channels, int base_channels,
                    Rng& rng) {
        require(image_size >= 4 && latent_size >= 1, "Vae: bad geometry");
        require(image_size % latent_size == 0, "Vae: latent must divide image size");
        const int ratio = image_size / latent_size;
        require(ratio >= 2 && (ratio & (ratio - 1)) == 0 && ratio <= 16,
                "Vae: downsample factor must be a power of two in [2,16]");
        int n_down = 0;
        for (int r = ratio; r > 1; r >>= 1) ++n_down;

        Vae v;
        v.image_size = image_size;
        v.latent_size = latent_size;
        v.latent_channels = latent_channels;
        v.base_channels = base_channels;

        std::vector<int> ch{3};
        for (int i = 0; i < n_down; ++i) ch.push_back(std::min(base_channels << i, 128));

        auto conv = [&rng](int ci, int co, int k, int stride, int pad, bool transposed) {
            // weight layout is [Ci,Co,kh,kw] for transposed convs, [Co,Ci,kh,kw] otherwise
            const Shape ws = transposed ? Shape{ci, co, k, k} : Shape{co, ci, k, k};
            const double std = std::sqrt(2.0 / (double(ci) * k * k));
            ConvSpec<T> c;
            c.w = Tensor<T>::randn(ws, rng, std, true);
            c.b = Tensor<T>::zeros({co}, true);
            c.stride = stride;
            c.pad = pad;
            c.transposed = transposed;
            return c;
        };

        for (int i = 0; i < n_down; ++i) v.enc.push_back(conv(ch[i], ch[i + 1], 4, 2, 1, false));
        v.enc.push_back(conv(ch.back(), latent_channels, 3, 1, 1, false));

        v.dec.push_back(conv(latent_channels, ch.back(), 3, 1, 1, false));
        for (int i = n_down; i >= 1; --i) v.dec.push_back(conv(ch[i], ch[i - 1], 4, 2, 1, true));
        return v;
    }

    Tensor<T> encode(const Tensor<T>& img) const {
        require(img.ndim() == 3 && img.dim(0) == 3 && img.dim(1) == image_size &&
                    img.dim(2) == image_size,
                "Vae::encode: want [3," + std::to_string(image_size) + "," +
                    std::to_string(image_size) + "], got " + shape_str(img.shape()));
        Tensor<T> x = img;
        for (size_t i = 0; i < enc.size(); ++i) {
            x = enc[i].apply(x);
            if (i + 1 < enc.size()) x = silu(x);
        }
        return x;
    }

    Tensor<T> decode(const Tensor<T>& e) const {
        require(e.ndim() == 3 && e.dim(0) == latent_channels && e.dim(1) == latent_size &&
                    e.dim(2) == latent_size,
                "Vae::decode: want [" + std::to_string(latent_channels) + "," +
                    std::to_string(latent_size) + "," + std::to_string(latent_size) + "], got " +
                    shape_str(e.shape()));
        Tensor<T> x = e;
        for (size_t i = 0; i < dec.size(); ++i) {
            x = dec[i].apply(x);
            x = (i + 1 < dec.size()) ? silu(x) : sigmoid(x);
        }
        return x;
    }

    template <class Fn>
    void visit_params(Fn&& fn) {
        for (auto* group : {&enc, &dec})
            for (auto& layer : *group) {
                fn(layer.w);
                fn(layer.b);
            }
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

template <class T>
struct ResidualPyramid {
    Tensor<T> E;                // source latent [C,h,w]
    std::vector<Tensor<T>> R;   // quantized residual maps, R[k] at (h_k,w_k)
    std::vector<Tensor<T>> F;   // context maps, filled by build_context
};

// Record/replay for the quantizer lookups inside tokenize_multiscale. A recorded
// plan freezes each site's code choice as a constant offset from its input, so a
// replayed tokenization is a smooth function whose finite differences match the
// straight-through gradients of the recording run.
template <class T>
struct StePlan {
    struct Site {
        std::vector<T> offset;  // selected code minus site feature at record time
        std::vector<int> idx;
    };
    std::vector<Site> sites;
    bool recording = true;
    size_t cursor = 0;

    void rewind() {
        recording = false;
        cursor = 0;
    }
};

template <class T>
struct TokenizeAux {
    std::vector<Tensor<T>> f;            // pre-quantization site features per scale, [n_k,C]
    std::vector<std::vector<int>> idx;   // selected code per site per scale
};

// Interpolate-quantize-subtract recursion: the running residual starts at E;
// each scale downsamples it, snaps every site to the nearest code (straight
// through), upsamples the snapped map back and subtracts it.
template <class T>
ResidualPyramid<T> tokenize_multiscale(const Tensor<T>& E, const Codebook<T>& cb,
                                       const ScaleSchedule& sched, StePlan<T>* plan = nullptr,
                                       TokenizeAux<T>* aux = nullptr) {
    require(E.ndim() == 3, "tokenize_multiscale: want latent [C,h,w], got " + shape_str(E.shape()));
    require(E.dim(0) == cb.C(), "tokenize_multiscale: latent channels " + std::to_string(E.dim(0)) +
                                    " != codebook dim " + std::to_string(cb.C()));
    const int h = E.dim(1), w = E.dim(2);
    sched.validate(h, w);

    ResidualPyramid<T> pyr;
    pyr.E = E;
    Tensor<T> residual = E;
    for (const auto& size : sched.sizes) {
        const int hk = size[0], wk = size[1];
        Tensor<T> ftok = chw_to_tokens(resize(residual, hk, wk, sched.down_mode));
        Tensor<T> rtok;
        if (plan != nullptr && !plan->recording) {
            require(plan->cursor < plan->sites.size(), "tokenize_multiscale: plan exhausted");
            const auto& site = plan->sites[plan->cursor++];
            require(site.offset.size() == ftok.val().size(),
                    "tokenize_multiscale: plan does not match this schedule");
            rtok = add(ftok, Tensor<T>::leaf(ftok.shape(), site.offset));
            if (aux) aux->idx.push_back(site.idx);
        } else {
            rtok = ste_lookup(ftok, cb);
            std::vector<int> idx = nearest_code(ftok, cb.z);
            if (plan != nullptr) {
                typename StePlan<T>::Site site;
                site.idx = idx;
                site.offset.resize(rtok.val().size());
                for (size_t i = 0; i < site.offset.size(); ++i)
                    site.offset[i] = rtok.val()[i] - ftok.val()[i];
                plan->sites.push_back(std::move(site));
            }
            if (aux) aux->idx.push_back(std::move(idx));
        }
        if (aux) aux->f.push_back(ftok);
        Tensor<T> rk = tokens_to_chw(rtok, hk, wk);
        pyr.R.push_back(rk);
        residual = sub(residual, resize(rk, h, w, sched.up_mode));
    }
    return pyr;
}

// Full-resolution quantized approximation of E: sum of all upsampled R_k.
template <class T>
Tensor<T> residual_sum(const ResidualPyramid<T>& pyr, const ScaleSchedule& sched) {
    require(!pyr.R.empty() && int(pyr.R.size()) == sched.K(),
            "residual_sum: pyramid does not match schedule");
    const int h = pyr.E.dim(1), w = pyr.E.dim(2);
    Tensor<T> s = resize(pyr.R[0], h, w, sched.up_mode);
    for (size_t k = 1; k < pyr.R.size(); ++k)
        s = add(s, resize(pyr.R[k], h, w, sched.up_mode));
    return s;
}

// F_k = down(sum of upsampled R_k, (h_k,w_k)). The finest context map is the
// accumulated sum itself since the final resize is a same-size copy.
template <class T>
std::vector<Tensor<T>> build_context(const ResidualPyramid<T>& pyr, const ScaleSchedule& sched) {
    Tensor<T> s = residual_sum(pyr, sched);
    std::vector<Tensor<T>> f;
    f.reserve(pyr.R.size());
    for (const auto& size : sched.sizes) f.push_back(resize(s, size[0], size[1], sched.down_mode));
    return f;
}

template <class T>
Tensor<T> reconstruct_image(const Vae<T>& vae, const ResidualPyramid<T>& pyr,
                            const ScaleSchedule& sched) {
    return vae.decode(residual_sum(pyr, sched));
}

struct PretrainConfig {
    int steps = 900;
    int batch = 16;
    double lr = 2e-3;
    double weight_decay = 0.0;
    int warmup = 50;
    double commit_weight = 0.25;   // pulls encoder outputs toward their codes
    double dict_weight = 1.0;      // pulls codes toward encoder outputs
    int revive_every = 100;        // dead-code refresh cadence, 0 disables
    uint64_t seed = 7;             // drives revival draws only
    int log_every = 0;
};

struct PretrainReport {
    bool ok = false;
    std::string error;
    int steps_run = 0;
    double final_loss = 0.0;
};

namespace detail {

// Mean over scales of the given per-scale loss builder.
template <class T, class PerScale>
Tensor<T> scale_mean(const TokenizeAux<T>& aux, PerScale&& per_scale) {
    Tensor<T> acc = per_scale(0);
    for (size_t k = 1; k < aux.f.size(); ++k) acc = add(acc, per_scale(int(k)));
    return mul_scalar(acc, T(1) / T(aux.f.size()));
}

}  // namespace detail

// One item's pretraining loss: image L1 plus codebook commitment and dictionary
// terms. The commitment term stops gradient at the codes; the dictionary term
// stops it at the features, so it is the only path that trains the codebook
// (straight-through lookups pass the codebook exactly zero gradient).
template <class T>
Tensor<T> tokenizer_pretrain_loss(const Vae<T>& vae, const Codebook<T>& cb,
                                  const ScaleSchedule& sched, const Tensor<T>& img,
                                  const PretrainConfig& pc, TokenizeAux<T>* aux_out = nullptr,
                                  StePlan<T>* plan = nullptr) {
    Tensor<T> e = vae.encode(img);
    TokenizeAux<T> aux;
    ResidualPyramid<T> pyr = tokenize_multiscale(e, cb, sched, plan, &aux);
    Tensor<T> loss = l1_loss(reconstruct_image(vae, pyr, sched), img);
    Tensor<T> commit = detail::scale_mean<T>(aux, [&](int k) {
        Tensor<T> codes;
        {
            NoGradGuard ng;
            codes = gather_rows(cb.z, aux.idx[size_t(k)]);
        }
        return mse_loss(aux.f[size_t(k)], codes);
    });
    Tensor<T> dict = detail::scale_mean<T>(aux, [&](int k) {
        return mse_loss(gather_rows(cb.z, aux.idx[size_t(k)]), detach(aux.f[size_t(k)]));
    });
    loss = add(loss, add(mul_scalar(commit, T(pc.commit_weight)),
                         mul_scalar(dict, T(pc.dict_weight))));
    if (aux_out) *aux_out = std::move(aux);
    return loss;
}

// Trains the VAE and codebook jointly on sample(index) images. Aborts with a
// diagnostic report if the loss goes nonfinite. Unused codebook rows are
// periodically reseeded from recently seen encoder outputs.
template <class T, class SampleFn, class LogFn>
PretrainReport pretrain_tokenizer(Vae<T>& vae, Codebook<T>& cb, const ScaleSchedule& sched,
                                  SampleFn&& sample, const PretrainConfig& pc, LogFn&& log) {
    require(pc.steps >= 1 && pc.batch >= 1, "pretrain_tokenizer: bad steps/batch");
    vae.set_trainable(true);
    cb.z.set_requires_grad(true);

    std::vector<Tensor<T>> params{cb.z};
    for (auto& p : vae.params()) params.push_back(p);
    typename AdamW<T>::Config oc;
    oc.lr = pc.lr;
    oc.weight_decay = pc.weight_decay;
    oc.warmup_steps = pc.warmup;
    AdamW<T> opt(params, oc);

    const int v_total = cb.V(), c_dim = cb.C();
    std::vector<int64_t> window_counts(size_t(v_total), 0);
    std::vector<std::vector<T>> reservoir;  // recent site features, for dead-code revival
    const size_t reservoir_cap = 512;
    Rng revive_rng(pc.seed, "pretrain-revive");

    PretrainReport report;
    int64_t index = 0;
    for (int step = 1; step <= pc.steps; ++step) {
        opt.zero_grad();
        double loss_sum = 0;
        for (int i = 0; i < pc.batch; ++i) {
            Tensor<T> img = sample(index++);
            TokenizeAux<T> aux;
            Tensor<T> loss = tokenizer_pretrain_loss(vae, cb, sched, img, pc, &aux);
            loss_sum += double(loss.item()) / pc.batch;
            backward(mul_scalar(loss, T(1.0 / pc.batch)));

            for (const auto& idx : aux.idx)
                for (int code : idx) ++window_counts[size_t(code)];
            const auto& fin = aux.f.back().val();
            const int rows = aux.f.back().dim(0);
            for (int pick = 0; pick < 2; ++pick) {
                const int r = revive_rng.uniform_int(0, rows - 1);
                std::vector<T> row(fin.begin() + size_t(r) * c_dim,
                                   fin.begin() + size_t(r + 1) * c_dim);
                if (reservoir.size() < reservoir_cap) {
                    reservoir.push_back(std::move(row));
                } else {
                    reservoir[size_t(revive_rng.uniform_int(0, int(reservoir_cap) - 1))] =
                        std::move(row);
                }
            }
        }
        if (!std::isfinite(loss_sum)) {
            report.error = "pretrain_tokenizer: nonfinite loss " + std::to_string(loss_sum) +
                           " at step " + std::to_string(step);
            report.steps_run = step - 1;
            return report;
        }
        opt.step();
        report.final_loss = loss_sum;
        report.steps_run = step;
        if (pc.log_every > 0 && step % pc.log_every == 0) log(step, loss_sum);

        if (pc.revive_every > 0 && step % pc.revive_every == 0 && !reservoir.empty()) {
            for (int code = 0; code < v_total; ++code) {
                if (window_counts[size_t(code)] > 0) continue;
                const auto& src = reservoir[size_t(
                    revive_rng.uniform_int(0, int(reservoir.size()) - 1))];
                for (int j = 0; j < c_dim; ++j)
                    cb.z.val()[size_t(code) * c_dim + j] =
                        src[size_t(j)] + T(0.02 * revive_rng.normal());
                opt.reset_state(0, size_t(code) * c_dim, size_t(code + 1) * c_dim);
            }
            std::fill(window_counts.begin(), window_counts.end(), 0);
        }
    }
    report.ok = true;
    return report;
}

template <class T, class SampleFn>
PretrainReport pretrain_tokenizer(Vae<T>& vae, Codebook<T>& cb, const ScaleSchedule& sched,
                                  SampleFn&& sample, const PretrainConfig& pc) {
    return pretrain_tokenizer(vae, cb, sched, std::forward<SampleFn>(sample), pc,
                              [](int, double) {});
}

// Mean round-trip reconstruction L1 over n images starting at start_index.
template <class T, class SampleFn>
double tokenizer_eval_l1(const Vae<T>& vae, const Codebook<T>& cb, const ScaleSchedule& sched,
                         SampleFn&& sample, int n, int64_t start_index) {
    NoGradGuard ng;
    double total = 0;
    for (int i = 0; i < n; ++i) {
        Tensor<T> img = sample(start_index + i);
        ResidualPyramid<T> pyr = tokenize_multiscale(vae.encode(img), cb, sched);
        total += double(l1_loss(reconstruct_image(vae, pyr, sched), img).item());
    }
    return total / n;
}

// Fraction of codebook entries selected at least once across n images.
template <class T, class SampleFn>
double codebook_usage(const Vae<T>& vae, const Codebook<T>& cb, const ScaleSchedule& sched,
                      SampleFn&& sample, int n, int64_t start_index) {
    NoGradGuard ng;
    std::vector<char> used(size_t(cb.V()), 0);
    for (int i = 0; i < n; ++i) {
        TokenizeAux<T> aux;
        tokenize_multiscale(vae.encode(sample(start_index + i)), cb, sched,
                            static_cast<StePlan<T>*>(nullptr), &aux);
        for (const auto& idx : aux.idx)
            for (int code : idx) used[size_t(code)] = 1;
    }
    int64_t count = 0;
    for (char u : used) count += u;
    return double(count) / double(cb.V());
}

}  // namespace cyclevar
