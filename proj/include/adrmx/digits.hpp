#pragma once

// Procedural stand-in for handwritten digits: each class is a fixed set of
// strokes in a unit box, rasterized at 28x28 with per-sample affine jitter
// (rotation, scale, shear, translation, stroke width) and pixel noise. The
// images feed the same construction pipeline as real scanned digits.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "adrmx/error.hpp"
#include "adrmx/rng.hpp"

namespace adrmx {

inline constexpr std::size_t kDigitImageSide = 28;
inline constexpr std::size_t kDigitImagePixels = kDigitImageSide * kDigitImageSide;

namespace detail {

struct Pt {
    double x, y;
};

// Stroke paths per digit, in a unit box with y pointing down. Arcs are
// expanded to polylines before rasterization.
struct Arc {
    double cx, cy, rx, ry, deg0, deg1;
};

struct GlyphSpec {
    std::vector<std::vector<Pt>> lines;
    std::vector<Arc> arcs;
};

inline const std::array<GlyphSpec, 10>& glyph_table() {
    static const std::array<GlyphSpec, 10> table = [] {
        std::array<GlyphSpec, 10> t;
        // 0: single oval
        t[0].arcs = {{0.50, 0.50, 0.26, 0.37, 0, 360}};
        // 1: flag, stem, base
        t[1].lines = {{{0.34, 0.28}, {0.54, 0.12}, {0.54, 0.88}}, {{0.38, 0.88}, {0.70, 0.88}}};
        // 2: top hook, diagonal, base bar
        t[2].arcs = {{0.50, 0.32, 0.24, 0.20, 180, 390}};
        t[2].lines = {{{0.71, 0.42}, {0.26, 0.88}}, {{0.26, 0.88}, {0.76, 0.88}}};
        // 3: two right-facing bowls
        t[3].arcs = {{0.47, 0.30, 0.24, 0.19, 160, 430}, {0.47, 0.68, 0.26, 0.20, 290, 560}};
        // 4: diagonal, crossbar, tall stem
        t[4].lines = {{{0.58, 0.10}, {0.22, 0.60}}, {{0.22, 0.60}, {0.80, 0.60}}, {{0.62, 0.10}, {0.62, 0.90}}};
        // 5: cap, spine, belly
        t[5].lines = {{{0.72, 0.12}, {0.32, 0.12}}, {{0.32, 0.12}, {0.30, 0.46}}, {{0.30, 0.46}, {0.44, 0.42}}};
        t[5].arcs = {{0.47, 0.64, 0.25, 0.23, 250, 520}};
        // 6: sweep into a lower loop
        t[6].lines = {{{0.66, 0.12}, {0.46, 0.38}}};
        t[6].arcs = {{0.50, 0.66, 0.23, 0.21, 0, 360}};
        // 7: bar, long diagonal, mid tick
        t[7].lines = {{{0.24, 0.14}, {0.76, 0.14}}, {{0.76, 0.14}, {0.42, 0.88}}, {{0.36, 0.52}, {0.64, 0.52}}};
        // 8: stacked loops
        t[8].arcs = {{0.50, 0.30, 0.20, 0.17, 0, 360}, {0.50, 0.68, 0.23, 0.20, 0, 360}};
        // 9: upper loop with a tail
        t[9].arcs = {{0.48, 0.34, 0.22, 0.20, 0, 360}};
        t[9].lines = {{{0.70, 0.36}, {0.60, 0.88}}};
        return t;
    }();
    return table;
}

inline void append_arc(std::vector<std::vector<Pt>>& out, const Arc& arc) {
    constexpr int kSegments = 24;
    std::vector<Pt> path;
    path.reserve(kSegments + 1);
    for (int i = 0; i <= kSegments; ++i) {
        const double deg = arc.deg0 + (arc.deg1 - arc.deg0) * i / kSegments;
        const double rad = deg * 3.14159265358979323846 / 180.0;
        path.push_back({arc.cx + arc.rx * std::cos(rad), arc.cy + arc.ry * std::sin(rad)});
    }
    out.push_back(std::move(path));
}

inline double point_segment_distance(double px, double py, const Pt& a, const Pt& b) {
    const double vx = b.x - a.x, vy = b.y - a.y;
    const double len_sq = vx * vx + vy * vy;
    double t = len_sq > 0.0 ? ((px - a.x) * vx + (py - a.y) * vy) / len_sq : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double dx = px - (a.x + t * vx), dy = py - (a.y + t * vy);
    return std::sqrt(dx * dx + dy * dy);
}

/// Separable 5-tap binomial low-pass with zero boundary. Band-limits the
/// rasterized strokes the way scanning and downsampling band-limit real
/// handwriting.
inline void binomial_smooth(std::vector<double>& image, std::size_t side) {
    static constexpr double kKernel[5] = {1.0 / 16, 4.0 / 16, 6.0 / 16, 4.0 / 16, 1.0 / 16};
    std::vector<double> tmp(image.size(), 0.0);
    for (std::size_t r = 0; r < side; ++r) {
        for (std::size_t c = 0; c < side; ++c) {
            double acc = 0.0;
            for (int k = -2; k <= 2; ++k) {
                const long long cc = static_cast<long long>(c) + k;
                if (cc < 0 || cc >= static_cast<long long>(side)) continue;
                acc += kKernel[k + 2] * image[r * side + static_cast<std::size_t>(cc)];
            }
            tmp[r * side + c] = acc;
        }
    }
    for (std::size_t c = 0; c < side; ++c) {
        for (std::size_t r = 0; r < side; ++r) {
            double acc = 0.0;
            for (int k = -2; k <= 2; ++k) {
                const long long rr = static_cast<long long>(r) + k;
                if (rr < 0 || rr >= static_cast<long long>(side)) continue;
                acc += kKernel[k + 2] * tmp[static_cast<std::size_t>(rr) * side + c];
            }
            image[r * side + c] = acc;
        }
    }
}

}  // namespace detail

/// Knobs for the glyph sampler. Angles in degrees, lengths in pixels.
struct DigitJitter {
    double max_rotation_deg = 8.0;
    double min_scale = 0.9;
    double max_scale = 1.1;
    double max_shear = 0.12;
    double max_translate_px = 1.5;
    double min_thickness_px = 1.0;
    double max_thickness_px = 1.6;
    double soft_edge_px = 2.2;  // stroke-to-background falloff width
    double pixel_noise = 0.03;
};

/// Render one digit glyph as a 28x28 image in [0,1], white-on-black.
inline std::vector<double> render_digit(int digit, Rng& rng, const DigitJitter& jitter = {}) {
    if (digit < 0 || digit > 9) throw ConfigError("render_digit: digit must be 0..9");
    const auto& spec = detail::glyph_table()[static_cast<std::size_t>(digit)];

    std::vector<std::vector<detail::Pt>> paths = spec.lines;
    for (const auto& arc : spec.arcs) detail::append_arc(paths, arc);

    const double rot = jitter.max_rotation_deg * 3.14159265358979323846 / 180.0 * rng.uniform(-1.0, 1.0);
    const double scale = rng.uniform(jitter.min_scale, jitter.max_scale);
    const double shear = rng.uniform(-jitter.max_shear, jitter.max_shear);
    const double tx = rng.uniform(-jitter.max_translate_px, jitter.max_translate_px);
    const double ty = rng.uniform(-jitter.max_translate_px, jitter.max_translate_px);
    const double thickness = rng.uniform(jitter.min_thickness_px, jitter.max_thickness_px);

    const double c = std::cos(rot), s = std::sin(rot);
    constexpr double kGlyphSpan = 20.0;  // glyph box size in pixels, centered
    const double center = (static_cast<double>(kDigitImageSide) - 1.0) / 2.0;
    for (auto& path : paths) {
        for (auto& p : path) {
            // unit box -> centered glyph coords -> jittered pixel coords
            double gx = (p.x - 0.5 + shear * (0.5 - p.y)) * kGlyphSpan * scale;
            double gy = (p.y - 0.5) * kGlyphSpan * scale;
            const double rx = c * gx - s * gy;
            const double ry = s * gx + c * gy;
            p.x = center + rx + tx;
            p.y = center + ry + ty;
        }
    }

    std::vector<double> image(kDigitImagePixels, 0.0);
    for (std::size_t row = 0; row < kDigitImageSide; ++row) {
        for (std::size_t col = 0; col < kDigitImageSide; ++col) {
            const double px = static_cast<double>(col), py = static_cast<double>(row);
            double best = 1e9;
            for (const auto& path : paths) {
                for (std::size_t i = 0; i + 1 < path.size(); ++i) {
                    best = std::min(best, detail::point_segment_distance(px, py, path[i], path[i + 1]));
                }
            }
            const double v = (thickness + jitter.soft_edge_px - best) / jitter.soft_edge_px;
            image[row * kDigitImageSide + col] = std::clamp(v, 0.0, 1.0);
        }
    }
    if (jitter.pixel_noise > 0.0) {
        for (auto& v : image) v = std::clamp(v + jitter.pixel_noise * rng.gaussian(), 0.0, 1.0);
    }
    detail::binomial_smooth(image, kDigitImageSide);
    return image;
}

/// A labeled batch of rendered glyphs with a balanced digit distribution.
struct DigitSet {
    std::vector<double> images;  // count * 28 * 28
    std::vector<int> labels;     // count

    std::size_t count() const { return labels.size(); }
};

inline DigitSet make_digit_set(std::size_t count, std::uint64_t seed, const DigitJitter& jitter = {}) {
    if (count == 0) throw ConfigError("make_digit_set: count must be positive");
    DigitSet set;
    set.labels.resize(count);
    for (std::size_t i = 0; i < count; ++i) set.labels[i] = static_cast<int>(i % 10);
    Rng order_rng(derive_seed(seed, "digit-order"));
    order_rng.shuffle(set.labels);

    Rng rng(derive_seed(seed, "digit-render"));
    set.images.reserve(count * kDigitImagePixels);
    for (std::size_t i = 0; i < count; ++i) {
        const auto img = render_digit(set.labels[i], rng, jitter);
        set.images.insert(set.images.end(), img.begin(), img.end());
    }
    return set;
}

}  // namespace adrmx
