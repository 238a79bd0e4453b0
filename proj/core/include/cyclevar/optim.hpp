#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "cyclevar/common.hpp"
#include "cyclevar/tensor.hpp"

namespace cyclevar {

// Decoupled-weight-decay Adam with optional linear warmup. Moments are kept in
// double regardless of T so long runs on float params stay stable.
template <class T>
struct AdamW {
    struct Config {
        double lr = 1e-4;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.01;
        int warmup_steps = 0;  // 0 disables warmup; else lr ramps linearly over this many steps
    };

    Config cfg;
    int64_t t = 0;

    explicit AdamW(std::vector<Tensor<T>> ps, Config c = {}) : cfg(c), params_(std::move(ps)) {
        for (auto& p : params_) {
            require(p.node() && p.node()->leaf && p.requires_grad(),
                    "AdamW: every param must be a trainable leaf");
            state_.push_back(Slot{std::vector<double>(p.val().size(), 0.0),
                                  std::vector<double>(p.val().size(), 0.0)});
        }
    }

    const std::vector<Tensor<T>>& params() const { return params_; }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    // L2 norm over all param grads, computed in double.
    double grad_norm() const {
        double s = 0;
        for (const auto& p : params_)
            for (T g : p.grad()) s += double(g) * double(g);
        return std::sqrt(s);
    }

    double current_lr() const {
        double lr = cfg.lr;
        if (cfg.warmup_steps > 0 && t < cfg.warmup_steps)
            lr *= double(t) / double(cfg.warmup_steps);
        return lr;
    }

    void step() {
        ++t;
        const double lr = current_lr();
        const double bc1 = 1.0 - std::pow(cfg.beta1, double(t));
        const double bc2 = 1.0 - std::pow(cfg.beta2, double(t));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& val = params_[i].val();
            const auto& grad = params_[i].grad();
            auto& m = state_[i].m;
            auto& v = state_[i].v;
            for (size_t j = 0; j < val.size(); ++j) {
                const double g = double(grad[j]);
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
                const double mh = m[j] / bc1;
                const double vh = v[j] / bc2;
                double p = double(val[j]);
                p -= lr * (mh / (std::sqrt(vh) + cfg.eps) + cfg.weight_decay * p);
                val[j] = T(p);
            }
        }
    }

    // Drops stale moments for a contiguous element range of one param. Used when
    // codebook rows are reinitialized mid-run.
    void reset_state(size_t param_index, size_t begin, size_t end) {
        require(param_index < state_.size(), "AdamW: param index out of range");
        auto& s = state_[param_index];
        require(end <= s.m.size() && begin <= end, "AdamW: bad state range");
        for (size_t j = begin; j < end; ++j) s.m[j] = s.v[j] = 0.0;
    }

private:
    struct Slot {
        std::vector<double> m, v;
    };
    std::vector<Tensor<T>> params_;
    std::vector<Slot> state_;
};

}  // namespace cyclevar
