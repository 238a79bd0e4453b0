#pragma once

#include <cstring>
#include <sstream>

#include "cyclevar/ops.hpp"

namespace cyclevar {

struct GradCheckConfig {
    double eps = 1e-6;
    double rel_tol = 1e-5;
    double abs_tol = 1e-8;
    // 0 checks every coordinate; otherwise a deterministic sample per input.
    int max_coords_per_input = 0;
    uint64_t seed = 0x67c0ffee;
};

struct GradReport {
    bool pass = true;
    double max_rel = 0.0;
    double max_abs = 0.0;
    int coords_checked = 0;
    std::string worst;  // coordinate with the largest relative error
    std::string error;  // structural failure: nondeterminism, non-finite values
};

// Compares tape gradients of scalar_weight . fn(inputs) against central
// differences. fn may return any shape; a fixed random contraction makes the
// scalar so every output coordinate influences the check. fn must rebuild its
// graph from `inputs` on each call (value mutation is how FD perturbs).
template <class T, class Fn>
GradReport grad_check(Fn&& fn, std::vector<Tensor<T>>& inputs, const GradCheckConfig& cfg = {}) {
    GradReport rep;

    auto eval_values = [&]() -> std::vector<T> {
        NoGradGuard ng;
        Tensor<T> out = fn(inputs);
        return out.val();
    };

    // Two forward passes must agree bitwise, or gradients are meaningless.
    const std::vector<T> out0 = eval_values();
    const std::vector<T> out1 = eval_values();
    if (out0.size() != out1.size() ||
        std::memcmp(out0.data(), out1.data(), out0.size() * sizeof(T)) != 0) {
        rep.pass = false;
        rep.error = "nondeterministic forward: two runs differ";
        return rep;
    }
    for (T v : out0)
        if (!std::isfinite(double(v))) {
            rep.pass = false;
            rep.error = "non-finite forward output";
            return rep;
        }

    Rng wrng(cfg.seed, "gradcheck-weights");
    std::vector<T> weights(out0.size());
    for (auto& w : weights) w = T(wrng.uniform(0.5, 1.5));
    auto contract = [&](const std::vector<T>& v) -> double {
        double s = 0;
        for (size_t i = 0; i < v.size(); ++i) s += double(v[i]) * double(weights[i]);
        return s;
    };

    // Analytic pass.
    for (auto& in : inputs)
        if (in.requires_grad()) in.zero_grad();
    {
        Tensor<T> out = fn(inputs);
        Tensor<T> wconst = Tensor<T>::leaf(out.shape(), weights, false);
        Tensor<T> loss = sum_all(mul(out, wconst));
        backward(loss);
    }
    std::vector<std::vector<T>> analytic;
    for (auto& in : inputs)
        analytic.push_back(in.requires_grad() ? in.grad() : std::vector<T>());

    for (size_t ii = 0; ii < inputs.size(); ++ii) {
        if (!inputs[ii].requires_grad()) continue;
        for (T g : analytic[ii])
            if (!std::isfinite(double(g))) {
                rep.pass = false;
                rep.error = "non-finite analytic gradient on input " + std::to_string(ii);
                return rep;
            }
    }

    // FD pass, central differences on the leaf values.
    Rng crng(cfg.seed, "gradcheck-coords");
    for (size_t ii = 0; ii < inputs.size(); ++ii) {
        if (!inputs[ii].requires_grad()) continue;
        auto& vals = inputs[ii].val();
        const int64_t n = int64_t(vals.size());
        std::vector<int64_t> coords;
        if (cfg.max_coords_per_input <= 0 || n <= cfg.max_coords_per_input) {
            coords.resize(size_t(n));
            for (int64_t i = 0; i < n; ++i) coords[size_t(i)] = i;
        } else {
            for (int i = 0; i < cfg.max_coords_per_input; ++i)
                coords.push_back(crng.uniform_int(0, int(n - 1)));
        }
        for (int64_t c : coords) {
            const T orig = vals[size_t(c)];
            vals[size_t(c)] = orig + T(cfg.eps);
            const double fp = contract(eval_values());
            vals[size_t(c)] = orig - T(cfg.eps);
            const double fm = contract(eval_values());
            vals[size_t(c)] = orig;
            const double fd = (fp - fm) / (2.0 * cfg.eps);
            const double an = double(analytic[ii][size_t(c)]);
            const double abs_err = std::abs(an - fd);
            const double scale = std::max(std::abs(an), std::abs(fd));
            const double rel_err = abs_err / std::max(scale, 1e-12);
            ++rep.coords_checked;
            if (abs_err > rep.max_abs) rep.max_abs = abs_err;
            if (rel_err > rep.max_rel && abs_err > cfg.abs_tol) {
                rep.max_rel = rel_err;
                std::ostringstream os;
                os << "input " << ii << " coord " << c << ": analytic " << an << ", fd " << fd;
                rep.worst = os.str();
            }
            if (abs_err > cfg.abs_tol + cfg.rel_tol * scale) rep.pass = false;
        }
    }
    return rep;
}

}  // namespace cyclevar
