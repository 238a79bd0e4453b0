#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cyclevar/common.hpp"
#include "cyclevar/rng.hpp"
#include "cyclevar/tensor.hpp"

namespace cyclevar {

// Procedural two-domain image source. Domain x draws from a warm palette,
// domain y from a cool one; shape geometry for a given (seed, index) is shared
// across domains so translation targets differ only in color.

enum class Domain { x, y };

inline const char* domain_name(Domain d) { return d == Domain::x ? "x" : "y"; }

struct SyntheticDomainSpec {
    uint64_t seed = 1234;
    int image_size = 32;
};

struct SynthShape {
    int kind = 0;  // 0 circle, 1 axis-aligned rectangle
    // normalized [0,1] coordinates, independent of image_size
    double cx = 0, cy = 0, rx = 0, ry = 0;
};

struct SynthMeta {
    std::vector<SynthShape> shapes;
};

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
    h = h - std::floor(h);
    const double c = v * s;
    const double hp = h * 6.0;
    const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
    double r1 = 0, g1 = 0, b1 = 0;
    if (hp < 1)      { r1 = c; g1 = x; }
    else if (hp < 2) { r1 = x; g1 = c; }
    else if (hp < 3) { g1 = c; b1 = x; }
    else if (hp < 4) { g1 = x; b1 = c; }
    else if (hp < 5) { r1 = x; b1 = c; }
    else             { r1 = c; b1 = x; }
    const double m = v - c;
    r = r1 + m;
    g = g1 + m;
    b = b1 + m;
}

namespace detail {

// warm: magenta through red into yellow; cool: cyan through blue into violet
inline double palette_hue(Domain d, double u) {
    return d == Domain::x ? 0.93 + 0.20 * u : 0.50 + 0.22 * u;
}

struct PaintColor {
    double r, g, b;
};

inline PaintColor draw_color(Rng& rng, Domain d, bool background) {
    const double u = rng.uniform();
    const double s = background ? rng.uniform(0.15, 0.40) : rng.uniform(0.60, 0.95);
    const double v = background ? rng.uniform(0.72, 0.95) : rng.uniform(0.35, 0.90);
    PaintColor c{};
    hsv_to_rgb(palette_hue(d, u), s, v, c.r, c.g, c.b);
    return c;
}

inline double shape_sdf(const SynthShape& s, double px, double py) {
    if (s.kind == 0) {
        const double dx = px - s.cx, dy = py - s.cy;
        return std::sqrt(dx * dx + dy * dy) - s.rx;
    }
    return std::max(std::fabs(px - s.cx) - s.rx, std::fabs(py - s.cy) - s.ry);
}

}  // namespace detail

// Geometry depends on (seed, index) only; palette additionally on the domain.
inline SynthMeta synth_geometry(const SyntheticDomainSpec& spec, int64_t index) {
    Rng rng(spec.seed, "synth-geom/" + std::to_string(index));
    SynthMeta meta;
    const int count = rng.uniform_int(1, 3);
    for (int i = 0; i < count; ++i) {
        SynthShape s;
        s.kind = rng.uniform_int(0, 1);
        s.cx = rng.uniform(0.22, 0.78);
        s.cy = rng.uniform(0.22, 0.78);
        s.rx = rng.uniform(0.10, 0.30);
        s.ry = s.kind == 0 ? s.rx : rng.uniform(0.10, 0.30);
        meta.shapes.push_back(s);
    }
    return meta;
}

template <class T>
struct SynthItem {
    Tensor<T> image;  // [3,S,S], values in [0,1]
    SynthMeta meta;
};

template <class T>
SynthItem<T> synth_image(const SyntheticDomainSpec& spec, Domain d, int64_t index) {
    const int size = spec.image_size;
    require(size >= 4, "synth_image: image_size too small");
    SynthMeta meta = synth_geometry(spec, index);

    Rng crng(spec.seed, std::string("synth-color/") + domain_name(d) + "/" + std::to_string(index));
    const detail::PaintColor bg = detail::draw_color(crng, d, true);
    std::vector<detail::PaintColor> fills;
    for (size_t i = 0; i < meta.shapes.size(); ++i) fills.push_back(detail::draw_color(crng, d, false));

    std::vector<T> px(size_t(3) * size * size);
    const double soft = 0.75 / size;  // anti-alias band, about 1.5px in normalized units
    for (int yi = 0; yi < size; ++yi) {
        for (int xi = 0; xi < size; ++xi) {
            const double pxn = (xi + 0.5) / size;
            const double pyn = (yi + 0.5) / size;
            double r = bg.r, g = bg.g, b = bg.b;
            for (size_t i = 0; i < meta.shapes.size(); ++i) {
                const double d0 = detail::shape_sdf(meta.shapes[i], pxn, pyn);
                const double cov = std::clamp(0.5 - d0 / (2.0 * soft), 0.0, 1.0);
                r += cov * (fills[i].r - r);
                g += cov * (fills[i].g - g);
                b += cov * (fills[i].b - b);
            }
            const size_t at = size_t(yi) * size + xi;
            px[at] = T(std::clamp(r, 0.0, 1.0));
            px[size_t(size) * size + at] = T(std::clamp(g, 0.0, 1.0));
            px[2 * size_t(size) * size + at] = T(std::clamp(b, 0.0, 1.0));
        }
    }
    return SynthItem<T>{Tensor<T>::leaf({3, size, size}, std::move(px)), std::move(meta)};
}

template <class T>
std::vector<SynthItem<T>> synth_sample(const SyntheticDomainSpec& spec, int n, Domain d,
                                       int64_t start_index = 0) {
    require(n >= 1, "synth_sample: n must be >= 1");
    std::vector<SynthItem<T>> out;
    out.reserve(size_t(n));
    for (int i = 0; i < n; ++i) out.push_back(synth_image<T>(spec, d, start_index + i));
    return out;
}

}  // namespace cyclevar
