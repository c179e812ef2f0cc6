#pragma once

/// @file data_synth.hpp
/// Paired synthetic source/target segmentation scenes with a controllable
/// appearance shift, plus the photometric jitter applied to target inputs.
///
/// A scene is generated in two passes. The geometry pass lays out class
/// regions into a label map and depends only on (seed, index, size, C). The
/// appearance pass renders that label map into RGB and is where the domain
/// shift enters, so two shifts with one seed give pixel-aligned label maps.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "iapc/common.hpp"

namespace iapc {

struct ImageSample {
    Image image;
    /// Empty when the sample was loaded through an images-only view.
    LabelMap label;
    std::string id;

    bool has_label() const noexcept { return !label.empty(); }
};

using Dataset = std::vector<ImageSample>;

/// Appearance change applied when rendering a domain.
struct DomainShiftSpec {
    double hue_shift = 0.0;           // degrees
    double brightness_scale = 1.0;
    double contrast_scale = 1.0;
    double noise_std = 0.0;           // additive Gaussian, intensity units
    double texture_freq_scale = 1.0;
    std::uint64_t seed = 0;           // seeds the additive shift noise only

    bool is_identity() const noexcept {
        return hue_shift == 0.0 && brightness_scale == 1.0 && contrast_scale == 1.0 && noise_std == 0.0 &&
               texture_freq_scale == 1.0;
    }

    static DomainShiftSpec identity() { return {}; }

    /// Benchmark target domain: a strong hue rotation with mild sensor noise
    /// and slightly finer texture. Contrast and brightness are left alone on
    /// purpose; shrinking them mostly destroys class separability instead of
    /// shifting it, and no unsupervised objective can recover that.
    static DomainShiftSpec paper_analog() {
        DomainShiftSpec s;
        s.hue_shift = 30.0;
        s.noise_std = 0.03;
        s.texture_freq_scale = 1.2;
        s.seed = 17;
        return s;
    }

    bool operator==(const DomainShiftSpec&) const = default;
};

namespace synth_detail {

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix(std::uint64_t a, std::uint64_t b) noexcept { return splitmix64(a ^ splitmix64(b)); }

// Stream tags keep geometry and appearance randomness independent.
inline constexpr std::uint64_t kGeometryStream = 0x67656f6d;
inline constexpr std::uint64_t kAppearanceStream = 0x61707065;
inline constexpr std::uint64_t kShiftStream = 0x73686674;

inline double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline std::array<double, 3> hsv_to_rgb(double hue_deg, double sat, double val) noexcept {
    double h = std::fmod(hue_deg, 360.0);
    if (h < 0) h += 360.0;
    const double c = val * sat;
    const double hp = h / 60.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    double r = 0, g = 0, b = 0;
    if (hp < 1) {
        r = c, g = x;
    } else if (hp < 2) {
        r = x, g = c;
    } else if (hp < 3) {
        g = c, b = x;
    } else if (hp < 4) {
        g = x, b = c;
    } else if (hp < 5) {
        r = x, b = c;
    } else {
        r = c, b = x;
    }
    const double m = val - c;
    return {r + m, g + m, b + m};
}

/// Rotation about the gray axis of RGB space; leaves grays fixed.
inline std::array<double, 9> hue_rotation(double degrees) noexcept {
    const double a = degrees * std::numbers::pi / 180.0;
    const double cs = std::cos(a), sn = std::sin(a);
    const double k = (1.0 - cs) / 3.0;
    const double s3 = std::sqrt(1.0 / 3.0) * sn;
    return {cs + k, k - s3, k + s3,  //
            k + s3, cs + k, k - s3,  //
            k - s3, k + s3, cs + k};
}

inline float quantize8(double v) noexcept {
    const double c = std::clamp(v, 0.0, 1.0);
    return static_cast<float>(std::round(c * 255.0) / 255.0);
}

/// Region primitives. Background (class 0) fills the frame; foreground classes
/// cycle through these kinds so that they differ in size and frequency.
enum class ShapeKind { Blob, Strip, Rect, Disc };

inline ShapeKind shape_kind(int cls) noexcept {
    static constexpr std::array<ShapeKind, 4> order{ShapeKind::Blob, ShapeKind::Strip, ShapeKind::Rect,
                                                    ShapeKind::Disc};
    return order[static_cast<std::size_t>((cls - 1) % 4)];
}

inline int paint_rank(ShapeKind k) noexcept {
    switch (k) {
        case ShapeKind::Blob: return 0;
        case ShapeKind::Rect: return 1;
        case ShapeKind::Strip: return 2;
        case ShapeKind::Disc: return 3;
    }
    return 0;
}

inline void paint_blob(LabelMap& m, int cls, std::mt19937_64& rng) {
    const double s = std::min(m.height(), m.width());
    const double cy = uniform(rng, 0.15, 0.85) * m.height();
    const double cx = uniform(rng, 0.15, 0.85) * m.width();
    const double ry = uniform(rng, 0.2, 0.36) * s;
    const double rx = uniform(rng, 0.2, 0.36) * s;
    const double rot = uniform(rng, 0.0, std::numbers::pi);
    const double wob = uniform(rng, 0.05, 0.18);
    const double phase = uniform(rng, 0.0, 2 * std::numbers::pi);
    const double cr = std::cos(rot), sr = std::sin(rot);
    for (int y = 0; y < m.height(); ++y) {
        for (int x = 0; x < m.width(); ++x) {
            const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
            const double u = (dx * cr + dy * sr) / rx;
            const double v = (-dx * sr + dy * cr) / ry;
            const double ang = std::atan2(v, u);
            const double lim = 1.0 + wob * std::sin(3.0 * ang + phase);
            if (u * u + v * v <= lim * lim) m(y, x) = static_cast<std::uint8_t>(cls);
        }
    }
}

inline void paint_strip(LabelMap& m, int cls, std::mt19937_64& rng) {
    const bool vertical = uniform(rng, 0.0, 1.0) < 0.5;
    const int len = vertical ? m.height() : m.width();
    const int across = vertical ? m.width() : m.height();
    const double center = uniform(rng, 0.2, 0.8) * across;
    const double amp = uniform(rng, 0.05, 0.15) * across;
    const double period = uniform(rng, 0.6, 1.4) * len;
    const double phase = uniform(rng, 0.0, 2 * std::numbers::pi);
    const double half = std::max(1.0, uniform(rng, 0.06, 0.1) * across);
    for (int a = 0; a < len; ++a) {
        const double c = center + amp * std::sin(2 * std::numbers::pi * (a + 0.5) / period + phase);
        for (int b = 0; b < across; ++b) {
            if (std::abs(b + 0.5 - c) <= half) {
                if (vertical) {
                    m(a, b) = static_cast<std::uint8_t>(cls);
                } else {
                    m(b, a) = static_cast<std::uint8_t>(cls);
                }
            }
        }
    }
}

inline void paint_rect(LabelMap& m, int cls, std::mt19937_64& rng) {
    const double s = std::min(m.height(), m.width());
    const double h = uniform(rng, 0.22, 0.42) * s;
    const double w = uniform(rng, 0.22, 0.42) * s;
    const double y0 = uniform(rng, 0.0, m.height() - h);
    const double x0 = uniform(rng, 0.0, m.width() - w);
    for (int y = 0; y < m.height(); ++y) {
        for (int x = 0; x < m.width(); ++x) {
            if (y + 0.5 >= y0 && y + 0.5 <= y0 + h && x + 0.5 >= x0 && x + 0.5 <= x0 + w) {
                m(y, x) = static_cast<std::uint8_t>(cls);
            }
        }
    }
}

inline void paint_discs(LabelMap& m, int cls, std::mt19937_64& rng) {
    const double s = std::min(m.height(), m.width());
    const int count = 2 + static_cast<int>(uniform(rng, 0.0, 2.0));
    for (int k = 0; k < count; ++k) {
        const double r = std::max(1.5, uniform(rng, 0.1, 0.15) * s);
        const double cy = uniform(rng, 0.05, 0.95) * m.height();
        const double cx = uniform(rng, 0.05, 0.95) * m.width();
        for (int y = 0; y < m.height(); ++y) {
            for (int x = 0; x < m.width(); ++x) {
                const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
                if (dy * dy + dx * dx <= r * r) m(y, x) = static_cast<std::uint8_t>(cls);
            }
        }
    }
}

inline LabelMap layout_scene(int num_classes, int height, int width, std::mt19937_64& rng) {
    LabelMap m(height, width, 0);
    std::vector<int> classes;
    for (int c = 1; c < num_classes; ++c) classes.push_back(c);
    std::stable_sort(classes.begin(), classes.end(),
                     [](int a, int b) { return paint_rank(shape_kind(a)) < paint_rank(shape_kind(b)); });
    for (int c : classes) {
        // Every draw happens even when the class is skipped so that the stream
        // position does not depend on earlier outcomes.
        const bool present = uniform(rng, 0.0, 1.0) < 0.85;
        LabelMap scratch(height, width, 0);
        switch (shape_kind(c)) {
            case ShapeKind::Blob: paint_blob(scratch, 1, rng); break;
            case ShapeKind::Strip: paint_strip(scratch, 1, rng); break;
            case ShapeKind::Rect: paint_rect(scratch, 1, rng); break;
            case ShapeKind::Disc: paint_discs(scratch, 1, rng); break;
        }
        if (!present) continue;
        for (int p = 0; p < m.pixels(); ++p) {
            if (scratch[p]) m[p] = static_cast<std::uint8_t>(c);
        }
    }
    return m;
}

/// Fixed per-class appearance: hue, saturation, value and a directional texture.
struct ClassLook {
    double hue;
    double sat;
    double val;
    double period;  // texture period in pixels
    double orient;  // texture direction in radians
};

inline ClassLook class_look(int cls, int num_classes) {
    static constexpr std::array<double, 6> periods{9.0, 5.0, 7.0, 4.0, 11.0, 6.0};
    ClassLook look;
    look.hue = std::fmod(15.0 + 360.0 * cls / num_classes, 360.0);
    look.sat = cls == 0 ? 0.08 : 0.55 + 0.1 * (cls % 3);
    look.val = 0.5 + 0.3 * static_cast<double>((cls * 2) % num_classes) / std::max(1, num_classes - 1);
    look.period = periods[static_cast<std::size_t>(cls) % periods.size()];
    look.orient = std::numbers::pi * static_cast<double>((cls * 3) % 8) / 8.0;
    return look;
}

inline Image render_scene(const LabelMap& labels, int num_classes, const DomainShiftSpec& shift,
                          std::uint64_t appearance_seed, std::uint64_t shift_seed) {
    std::mt19937_64 rng(appearance_seed);
    // Per-image illumination variability shared by both domains.
    const double img_gain = uniform(rng, 0.9, 1.1);
    const double img_hue = uniform(rng, -6.0, 6.0);
    std::vector<double> phases(static_cast<std::size_t>(num_classes));
    for (auto& ph : phases) ph = uniform(rng, 0.0, 2 * std::numbers::pi);

    std::vector<ClassLook> looks;
    for (int c = 0; c < num_classes; ++c) {
        looks.push_back(class_look(c, num_classes));
    }

    std::normal_distribution<double> sensor(0.0, 0.02);
    std::mt19937_64 shift_rng(shift_seed);
    std::normal_distribution<double> extra(0.0, shift.noise_std > 0 ? shift.noise_std : 1.0);

    Image img(labels.height(), labels.width(), 3);
    for (int y = 0; y < labels.height(); ++y) {
        for (int x = 0; x < labels.width(); ++x) {
            const int c = labels(y, x);
            const ClassLook& lk = looks[static_cast<std::size_t>(c)];
            const double along = (x + 0.5) * std::cos(lk.orient) + (y + 0.5) * std::sin(lk.orient);
            const double tex = std::sin(2 * std::numbers::pi * along * shift.texture_freq_scale / lk.period +
                                        phases[static_cast<std::size_t>(c)]);
            const double val = std::clamp(lk.val * img_gain * (1.0 + 0.3 * tex), 0.0, 1.0);
            auto rgb = hsv_to_rgb(lk.hue + img_hue + shift.hue_shift, lk.sat, val);
            for (int ch = 0; ch < 3; ++ch) {
                double v = rgb[static_cast<std::size_t>(ch)];
                v = 0.5 + shift.contrast_scale * (v - 0.5);
                v *= shift.brightness_scale;
                v += sensor(rng);
                if (shift.noise_std > 0) v += extra(shift_rng);
                img(y, x, ch) = quantize8(v);
            }
        }
    }
    return img;
}

inline std::string scene_id(int index) {
    std::string digits = std::to_string(index);
    return "scene_" + std::string(digits.size() < 5 ? 5 - digits.size() : 0, '0') + digits;
}

}  // namespace synth_detail

/// Deterministic synthetic dataset of n scenes. Every class in {0..C-1}
/// appears in at least one label map.
inline Dataset generate_scene_dataset(int n, int num_classes, int height, int width, const DomainShiftSpec& shift,
                                      std::uint64_t seed) {
    using namespace synth_detail;
    if (num_classes < 2 || num_classes >= kMaxClasses) {
        throw ParameterError("generate_scene_dataset: num_classes must be in [2, 254]");
    }
    if (height < 16 || width < 16) {
        throw ParameterError("generate_scene_dataset: height and width must be >= 16");
    }
    if (n < 1) {
        throw ParameterError("generate_scene_dataset: n must be >= 1");
    }
    if (!(shift.brightness_scale > 0) || !(shift.contrast_scale >= 0) || !(shift.noise_std >= 0) ||
        !(shift.texture_freq_scale > 0)) {
        throw ParameterError("generate_scene_dataset: invalid domain shift");
    }

    std::vector<LabelMap> layouts;
    layouts.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        std::mt19937_64 rng(mix(mix(seed, kGeometryStream), static_cast<std::uint64_t>(i)));
        layouts.push_back(layout_scene(num_classes, height, width, rng));
    }

    // Coverage repair: stamp any class that never appeared into its own slot.
    std::vector<bool> seen(static_cast<std::size_t>(num_classes), false);
    for (const auto& m : layouts) {
        for (auto v : m.values()) seen[v] = true;
    }
    int side = std::max(1, std::min(height, width) / 8);
    if ((height / side) * (width / side) < num_classes) side = 1;
    const int slots_per_row = width / side;
    for (int c = 0; c < num_classes; ++c) {
        if (seen[static_cast<std::size_t>(c)]) continue;
        LabelMap& m = layouts[static_cast<std::size_t>(c % n)];
        const int y0 = (c / slots_per_row) * side;
        const int x0 = (c % slots_per_row) * side;
        for (int y = y0; y < y0 + side; ++y) {
            for (int x = x0; x < x0 + side; ++x) m(y, x) = static_cast<std::uint8_t>(c);
        }
    }

    Dataset out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const auto idx = static_cast<std::uint64_t>(i);
        const std::uint64_t app_seed = mix(mix(seed, kAppearanceStream), idx);
        const std::uint64_t shift_seed = mix(mix(mix(seed, kShiftStream), shift.seed), idx);
        ImageSample s;
        s.image = render_scene(layouts[idx], num_classes, shift, app_seed, shift_seed);
        s.label = std::move(layouts[idx]);
        s.id = scene_id(i);
        out.push_back(std::move(s));
    }
    return out;
}

/// Ranges of the photometric jitter at strength 1. Each range scales linearly
/// with the strength argument.
struct JitterRanges {
    double brightness = 0.4;  // gain drawn from [1-b, 1+b]
    double contrast = 0.4;    // gain about the image mean drawn from [1-c, 1+c]
    double hue_degrees = 40.0;
    double noise_std = 0.04;
};

/// Brightness, contrast, hue rotation and additive noise, in that order,
/// followed by clamping to [0,1]. No spatial change.
inline Image photometric_augment(const Image& image, double strength, std::uint64_t seed,
                                 const JitterRanges& ranges = {}) {
    using namespace synth_detail;
    if (!(strength >= 0.0 && strength <= 1.0)) {
        throw ParameterError("photometric_augment: strength must lie in [0,1]");
    }
    if (image.channels() != 3) {
        throw ParameterError("photometric_augment: expected an RGB image");
    }
    if (strength == 0.0) {
        return image;
    }
    std::mt19937_64 rng(splitmix64(seed));
    const double gain = uniform(rng, 1.0 - ranges.brightness * strength, 1.0 + ranges.brightness * strength);
    const double contrast = uniform(rng, 1.0 - ranges.contrast * strength, 1.0 + ranges.contrast * strength);
    const double hue = uniform(rng, -ranges.hue_degrees * strength, ranges.hue_degrees * strength);
    const double sigma = ranges.noise_std * strength;
    const auto rot = hue_rotation(hue);

    double mean = 0;
    for (float v : image.values()) mean += v;
    mean = mean / static_cast<double>(image.size()) * gain;

    std::normal_distribution<double> noise(0.0, sigma);
    Image out(image.height(), image.width(), 3);
    for (int p = 0; p < image.pixels(); ++p) {
        auto src = image.pixel(p);
        std::array<double, 3> v{};
        for (int ch = 0; ch < 3; ++ch) {
            v[static_cast<std::size_t>(ch)] = mean + contrast * (src[static_cast<std::size_t>(ch)] * gain - mean);
        }
        auto dst = out.pixel(p);
        for (int ch = 0; ch < 3; ++ch) {
            const auto r = static_cast<std::size_t>(ch) * 3;
            double w = rot[r] * v[0] + rot[r + 1] * v[1] + rot[r + 2] * v[2];
            if (sigma > 0) w += noise(rng);
            dst[static_cast<std::size_t>(ch)] = static_cast<float>(std::clamp(w, 0.0, 1.0));
        }
    }
    return out;
}

}  // namespace iapc
