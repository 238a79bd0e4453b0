#pragma once

#include <functional>
#include <map>

#include "cyclevar/ops.hpp"

namespace cyclevar {

// Attribute bag for the name-based dispatcher. Numeric scalars (tau, stride,
// pad, ...) live in num; integer lists (shapes, indices) in ints; enum-like
// choices in str.
struct OpAttrs {
    std::map<std::string, double> num;
    std::map<std::string, std::vector<int>> ints;
    std::map<std::string, std::string> str;

    double get_num(const std::string& k) const {
        auto it = num.find(k);
        require(it != num.end(), "op attrs: missing numeric attribute '" + k + "'");
        return it->second;
    }
    double get_num(const std::string& k, double fallback) const {
        auto it = num.find(k);
        return it == num.end() ? fallback : it->second;
    }
    const std::vector<int>& get_ints(const std::string& k) const {
        auto it = ints.find(k);
        require(it != ints.end(), "op attrs: missing int-list attribute '" + k + "'");
        return it->second;
    }
    std::string get_str(const std::string& k, const std::string& fallback) const {
        auto it = str.find(k);
        return it == str.end() ? fallback : it->second;
    }
};

template <class T>
struct OpCase {
    std::vector<Tensor<T>> inputs;
    OpAttrs attrs;
};

// One registered primitive: how to run it, and how to draw a well-formed
// random test case. fd_check marks ops whose tape gradient must agree with
// central differences; lookup-style ops define custom gradients and are
// excluded here, tested against their own contracts instead.
template <class T>
struct OpEntry {
    std::string name;
    bool fd_check = true;
    std::function<Tensor<T>(const std::vector<Tensor<T>>&, const OpAttrs&)> apply;
    std::function<OpCase<T>(Rng&)> sample;
};

namespace detail {

template <class T>
Tensor<T> rnd(Shape shape, Rng& rng, bool rg = true) {
    std::vector<T> v(size_t(shape_size(shape)));
    for (auto& x : v) x = T(rng.normal());
    return Tensor<T>::leaf(std::move(shape), std::move(v), rg);
}

// Values bounded away from zero (for abs kinks and divisors).
template <class T>
Tensor<T> rnd_away(Shape shape, Rng& rng, double margin) {
    std::vector<T> v(size_t(shape_size(shape)));
    for (auto& x : v) {
        const double n = rng.normal();
        x = T(n >= 0 ? n + margin : n - margin);
    }
    return Tensor<T>::leaf(std::move(shape), std::move(v), true);
}

// Strictly positive values.
template <class T>
Tensor<T> rnd_pos(Shape shape, Rng& rng, double lo) {
    std::vector<T> v(size_t(shape_size(shape)));
    for (auto& x : v) x = T(std::abs(rng.normal()) + lo);
    return Tensor<T>::leaf(std::move(shape), std::move(v), true);
}

template <class T>
void check_arity(const std::string& name, const std::vector<Tensor<T>>& ins, size_t want) {
    require(ins.size() == want, name + ": expected " + std::to_string(want) + " inputs, got " +
                                    std::to_string(ins.size()));
}

}  // namespace detail

template <class T>
const std::vector<OpEntry<T>>& op_registry() {
    using detail::check_arity;
    using detail::rnd;
    using detail::rnd_away;
    using detail::rnd_pos;
    static const std::vector<OpEntry<T>> registry = [] {
        std::vector<OpEntry<T>> r;
        auto shape2 = [](Rng& g) {
            return Shape{g.uniform_int(1, 5), g.uniform_int(1, 6)};
        };
        auto add_ew2 = [&r, shape2](const std::string& name,
                                    Tensor<T> (*fn)(const Tensor<T>&, const Tensor<T>&)) {
            r.push_back({name, true,
                         [name, fn](const std::vector<Tensor<T>>& ins, const OpAttrs&) {
                             check_arity(name, ins, 2);
                             return fn(ins[0], ins[1]);
                         },
                         [shape2](Rng& g) {
                             Shape s = shape2(g);
                             return OpCase<T>{{rnd<T>(s, g), rnd<T>(s, g)}, {}};
                         }});
        };
        auto add_ew1 = [&r, shape2](const std::string& name, Tensor<T> (*fn)(const Tensor<T>&)) {
            r.push_back({name, true,
                         [name, fn](const std::vector<Tensor<T>>& ins, const OpAttrs&) {
                             check_arity(name, ins, 1);
                             return fn(ins[0]);
                         },
                         [shape2](Rng& g) {
                             return OpCase<T>{{rnd<T>(shape2(g), g)}, {}};
                         }});
        };

        add_ew2("add", add<T>);
        add_ew2("sub", sub<T>);
        add_ew2("mul", mul<T>);
        r.push_back({"div", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs&) {
                         check_arity<T>("div", ins, 2);
                         return div(ins[0], ins[1]);
                     },
                     [shape2](Rng& g) {
                         Shape s = shape2(g);
                         return OpCase<T>{{rnd<T>(s, g), rnd_away<T>(s, g, 0.5)}, {}};
                     }});
        add_ew1("exp", exp_<T>);
        r.push_back({"log", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs&) {
                         check_arity<T>("log", ins, 1);
                         return log_(ins[0]);
                     },
                     [shape2](Rng& g) {
                         return OpCase<T>{{rnd_pos<T>(shape2(g), g, 0.3)}, {}};
                     }});
        r.push_back({"sqrt", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs&) {
                         check_arity<T>("sqrt", ins, 1);
                         return sqrt_(ins[0]);
                     },
                     [shape2](Rng& g) {
                         return OpCase<T>{{rnd_pos<T>(shape2(g), g, 0.3)}, {}};
                     }});
        r.push_back({"abs", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs&) {
                         check_arity<T>("abs", ins, 1);
                         return abs_(ins[0]);
                     },
                     [shape2](Rng& g) {
                         return OpCase<T>{{rnd_away<T>(shape2(g), g, 0.2)}, {}};
                     }});
        add_ew1("tanh", tanh_<T>);
        add_ew1("sigmoid", sigmoid<T>);
        add_ew1("silu", silu<T>);
        add_ew1("softplus", softplus<T>);
        add_ew1("neg", neg<T>);

        r.push_back({"add_scalar", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs& a) {
                         check_arity<T>("add_scalar", ins, 1);
                         return add_scalar(ins[0], T(a.get_num("c")));
                     },
                     [shape2](Rng& g) {
                         OpCase<T> c{{rnd<T>(shape2(g), g)}, {}};
                         c.attrs.num["c"] = g.uniform(-2.0, 2.0);
                         return c;
                     }});
        r.push_back({"mul_scalar", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs& a) {
                         check_arity<T>("mul_scalar", ins, 1);
                         return mul_scalar(ins[0], T(a.get_num("c")));
                     },
                     [shape2](Rng& g) {
                         OpCase<T> c{{rnd<T>(shape2(g), g)}, {}};
                         c.attrs.num["c"] = g.uniform(-2.0, 2.0);
                         return c;
                     }});
        r.push_back({"lerp_fixed", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs& a) {
                         check_arity<T>("lerp_fixed", ins, 2);
                         return lerp_fixed(ins[0], ins[1], T(a.get_num("a")));
                     },
                     [shape2](Rng& g) {
                         Shape s = shape2(g);
                         OpCase<T> c{{rnd<T>(s, g), rnd<T>(s, g)}, {}};
                         c.attrs.num["a"] = g.uniform(0.0, 1.0);
                         return c;
                     }});

        r.push_back({"matmul", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs&) {
                         check_arity<T>("matmul", ins, 2);
                         return matmul(ins[0], ins[1]);
                     },
                     [](Rng& g) {
                         const int m = g.uniform_int(1, 5), k = g.uniform_int(1, 6),
                                   n = g.uniform_int(1, 5);
                         return OpCase<T>{{rnd<T>({m, k}, g), rnd<T>({k, n}, g)}, {}};
                     }});
        r.push_back({"transpose2d", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs&) {
                         check_arity<T>("transpose2d", ins, 1);
                         return transpose2d(ins[0]);
                     },
                     [shape2](Rng& g) {
                         return OpCase<T>{{rnd<T>(shape2(g), g)}, {}};
                     }});

        add_ew1("sum_all", sum_all<T>);
        add_ew1("mean_all", mean_all<T>);
        r.push_back({"add_rowvec", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs&) {
                         check_arity<T>("add_rowvec", ins, 2);
                         return add_rowvec(ins[0], ins[1]);
                     },
                     [shape2](Rng& g) {
                         Shape s = shape2(g);
                         return OpCase<T>{{rnd<T>(s, g), rnd<T>({s[1]}, g)}, {}};
                     }});
        r.push_back({"mul_rowvec", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs&) {
                         check_arity<T>("mul_rowvec", ins, 2);
                         return mul_rowvec(ins[0], ins[1]);
                     },
                     [shape2](Rng& g) {
                         Shape s = shape2(g);
                         return OpCase<T>{{rnd<T>(s, g), rnd<T>({s[1]}, g)}, {}};
                     }});

        r.push_back({"softmax_rows", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs& a) {
                         check_arity<T>("softmax_rows", ins, 1);
                         return softmax_rows(ins[0], a.get_num("tau", 1.0));
                     },
                     [shape2](Rng& g) {
                         OpCase<T> c{{rnd<T>(shape2(g), g)}, {}};
                         c.attrs.num["tau"] = g.uniform(0.5, 3.0);
                         return c;
                     }});
        r.push_back({"layer_norm_rows", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs& a) {
                         check_arity<T>("layer_norm_rows", ins, 1);
                         return layer_norm_rows(ins[0], a.get_num("eps", 1e-5));
                     },
                     [](Rng& g) {
                         OpCase<T> c{{rnd<T>({g.uniform_int(1, 5), g.uniform_int(2, 6)}, g)}, {}};
                         c.attrs.num["eps"] = 1e-5;
                         return c;
                     }});

        r.push_back({"reshape", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs& a) {
                         check_arity<T>("reshape", ins, 1);
                         const auto& s = a.get_ints("shape");
                         return reshape(ins[0], Shape(s.begin(), s.end()));
                     },
                     [](Rng& g) {
                         const int m = g.uniform_int(1, 4), n = g.uniform_int(1, 6);
                         OpCase<T> c{{rnd<T>({m, n}, g)}, {}};
                         c.attrs.ints["shape"] = {m * n};
                         return c;
                     }});
        r.push_back({"concat_rows", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs&) {
                         return concat_rows(ins);
                     },
                     [](Rng& g) {
                         const int d = g.uniform_int(1, 4);
                         OpCase<T> c;
                         const int parts = g.uniform_int(2, 3);
                         for (int i = 0; i < parts; ++i)
                             c.inputs.push_back(rnd<T>({g.uniform_int(1, 4), d}, g));
                         return c;
                     }});
        r.push_back({"concat_cols", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs&) {
                         return concat_cols(ins);
                     },
                     [](Rng& g) {
                         const int t = g.uniform_int(1, 4);
                         OpCase<T> c;
                         const int parts = g.uniform_int(2, 3);
                         for (int i = 0; i < parts; ++i)
                             c.inputs.push_back(rnd<T>({t, g.uniform_int(1, 4)}, g));
                         return c;
                     }});
        r.push_back({"slice_rows", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs& a) {
                         check_arity<T>("slice_rows", ins, 1);
                         return slice_rows(ins[0], a.get_ints("range")[0], a.get_ints("range")[1]);
                     },
                     [](Rng& g) {
                         const int t = g.uniform_int(2, 6), d = g.uniform_int(1, 4);
                         const int b = g.uniform_int(0, t - 1);
                         const int e = g.uniform_int(b + 1, t);
                         OpCase<T> c{{rnd<T>({t, d}, g)}, {}};
                         c.attrs.ints["range"] = {b, e};
                         return c;
                     }});
        r.push_back({"slice_cols", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs& a) {
                         check_arity<T>("slice_cols", ins, 1);
                         return slice_cols(ins[0], a.get_ints("range")[0], a.get_ints("range")[1]);
                     },
                     [](Rng& g) {
                         const int t = g.uniform_int(1, 4), d = g.uniform_int(2, 6);
                         const int b = g.uniform_int(0, d - 1);
                         const int e = g.uniform_int(b + 1, d);
                         OpCase<T> c{{rnd<T>({t, d}, g)}, {}};
                         c.attrs.ints["range"] = {b, e};
                         return c;
                     }});

        r.push_back({"chw_to_tokens", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs&) {
                         check_arity<T>("chw_to_tokens", ins, 1);
                         return chw_to_tokens(ins[0]);
                     },
                     [](Rng& g) {
                         return OpCase<T>{
                             {rnd<T>({g.uniform_int(1, 3), g.uniform_int(1, 4), g.uniform_int(1, 4)}, g)},
                             {}};
                     }});
        r.push_back({"tokens_to_chw", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs& a) {
                         check_arity<T>("tokens_to_chw", ins, 1);
                         return tokens_to_chw(ins[0], a.get_ints("hw")[0], a.get_ints("hw")[1]);
                     },
                     [](Rng& g) {
                         const int h = g.uniform_int(1, 4), w = g.uniform_int(1, 4);
                         OpCase<T> c{{rnd<T>({h * w, g.uniform_int(1, 3)}, g)}, {}};
                         c.attrs.ints["hw"] = {h, w};
                         return c;
                     }});
        r.push_back({"mean_spatial", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs&) {
                         check_arity<T>("mean_spatial", ins, 1);
                         return mean_spatial(ins[0]);
                     },
                     [](Rng& g) {
                         return OpCase<T>{
                             {rnd<T>({g.uniform_int(1, 3), g.uniform_int(1, 4), g.uniform_int(1, 4)}, g)},
                             {}};
                     }});

        r.push_back({"conv2d", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs& a) {
                         check_arity<T>("conv2d", ins, 3);
                         return conv2d(ins[0], ins[1], ins[2], int(a.get_num("stride")),
                                       int(a.get_num("pad")));
                     },
                     [](Rng& g) {
                         const int ci = g.uniform_int(1, 3), co = g.uniform_int(1, 3);
                         const int k = g.uniform_int(1, 4);
                         const int stride = g.uniform_int(1, 2), pad = g.uniform_int(0, 1);
                         const int h = std::max(k, g.uniform_int(3, 7));
                         const int w = std::max(k, g.uniform_int(3, 7));
                         OpCase<T> c{{rnd<T>({ci, h, w}, g), rnd<T>({co, ci, k, k}, g),
                                      rnd<T>({co}, g)},
                                     {}};
                         c.attrs.num["stride"] = stride;
                         c.attrs.num["pad"] = pad;
                         return c;
                     }});
        r.push_back({"conv2d_transpose", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs& a) {
                         check_arity<T>("conv2d_transpose", ins, 3);
                         return conv2d_transpose(ins[0], ins[1], ins[2], int(a.get_num("stride")),
                                                 int(a.get_num("pad")));
                     },
                     [](Rng& g) {
                         const int ci = g.uniform_int(1, 3), co = g.uniform_int(1, 3);
                         const int k = g.uniform_int(2, 4);
                         const int stride = g.uniform_int(1, 2);
                         const int pad = g.uniform_int(0, std::min(1, k - 1));
                         const int h = g.uniform_int(2, 5), w = g.uniform_int(2, 5);
                         OpCase<T> c{{rnd<T>({ci, h, w}, g), rnd<T>({ci, co, k, k}, g),
                                      rnd<T>({co}, g)},
                                     {}};
                         c.attrs.num["stride"] = stride;
                         c.attrs.num["pad"] = pad;
                         return c;
                     }});

        r.push_back({"upsample_nearest", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs& a) {
                         check_arity<T>("upsample_nearest", ins, 1);
                         return upsample_nearest(ins[0], int(a.get_num("th")), int(a.get_num("tw")));
                     },
                     [](Rng& g) {
                         const int h = g.uniform_int(1, 3), w = g.uniform_int(1, 3);
                         OpCase<T> c{{rnd<T>({g.uniform_int(1, 3), h, w}, g)}, {}};
                         c.attrs.num["th"] = h * g.uniform_int(1, 3);
                         c.attrs.num["tw"] = w * g.uniform_int(1, 3);
                         return c;
                     }});
        r.push_back({"upsample_bilinear", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs& a) {
                         check_arity<T>("upsample_bilinear", ins, 1);
                         return upsample_bilinear(ins[0], int(a.get_num("th")), int(a.get_num("tw")));
                     },
                     [](Rng& g) {
                         const int h = g.uniform_int(1, 3), w = g.uniform_int(1, 3);
                         OpCase<T> c{{rnd<T>({g.uniform_int(1, 3), h, w}, g)}, {}};
                         c.attrs.num["th"] = h * g.uniform_int(1, 3);
                         c.attrs.num["tw"] = w * g.uniform_int(1, 3);
                         return c;
                     }});
        r.push_back({"downsample_area", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs& a) {
                         check_arity<T>("downsample_area", ins, 1);
                         return downsample_area(ins[0], int(a.get_num("th")), int(a.get_num("tw")));
                     },
                     [](Rng& g) {
                         const int th = g.uniform_int(1, 3), tw = g.uniform_int(1, 3);
                         const int fh = g.uniform_int(1, 3), fw = g.uniform_int(1, 3);
                         OpCase<T> c{{rnd<T>({g.uniform_int(1, 3), th * fh, tw * fw}, g)}, {}};
                         c.attrs.num["th"] = th;
                         c.attrs.num["tw"] = tw;
                         return c;
                     }});

        r.push_back({"gather_rows", true,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs& a) {
                         check_arity<T>("gather_rows", ins, 1);
                         return gather_rows(ins[0], a.get_ints("idx"));
                     },
                     [](Rng& g) {
                         const int v = g.uniform_int(2, 6), c0 = g.uniform_int(1, 4);
                         OpCase<T> c{{rnd<T>({v, c0}, g)}, {}};
                         std::vector<int> idx(size_t(g.uniform_int(1, 5)));
                         for (auto& i : idx) i = g.uniform_int(0, v - 1);
                         c.attrs.ints["idx"] = std::move(idx);
                         return c;
                     }});

        // Custom-gradient and constant ops: excluded from the FD sweep, their
        // contracts are asserted directly in the quantizer tests.
        r.push_back({"ste_nearest_lookup", false,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs&) {
                         check_arity<T>("ste_nearest_lookup", ins, 2);
                         return ste_nearest_lookup(ins[0], ins[1]);
                     },
                     [](Rng& g) {
                         const int c0 = g.uniform_int(1, 4);
                         return OpCase<T>{
                             {rnd<T>({g.uniform_int(1, 5), c0}, g), rnd<T>({g.uniform_int(2, 6), c0}, g)},
                             {}};
                     }});
        r.push_back({"argmax_lookup", false,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs&) {
                         check_arity<T>("argmax_lookup", ins, 2);
                         return argmax_lookup(ins[0], ins[1]);
                     },
                     [](Rng& g) {
                         const int v = g.uniform_int(2, 6);
                         return OpCase<T>{
                             {rnd<T>({g.uniform_int(1, 5), v}, g), rnd<T>({v, g.uniform_int(1, 4)}, g)},
                             {}};
                     }});
        r.push_back({"detach", false,
                     [](const std::vector<Tensor<T>>& ins, const OpAttrs&) {
                         check_arity<T>("detach", ins, 1);
                         return detach(ins[0]);
                     },
                     [shape2](Rng& g) {
                         return OpCase<T>{{rnd<T>(shape2(g), g)}, {}};
                     }});
        return r;
    }();
    return registry;
}

template <class T>
Tensor<T> forward_op(const std::string& name, const std::vector<Tensor<T>>& inputs,
                     const OpAttrs& attrs = {}) {
    for (const auto& e : op_registry<T>())
        if (e.name == name) return e.apply(inputs, attrs);
    fail("forward_op: unknown op '" + name + "'");
}

}  // namespace cyclevar
