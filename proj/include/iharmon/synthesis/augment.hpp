#pragma once

// Appearance augmentations applied to a masked region of an RGB image.
// Arithmetic runs in double; pixels outside the mask are copied untouched.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <map>
#include <vector>

#include <nlohmann/json.hpp>

#include "iharmon/error.hpp"
#include "iharmon/imaging.hpp"

namespace iharmon::synthesis {

namespace detail {

inline void require_rgb(const Image& img, const Mask& mask, const char* op)
{
    if (img.channels() != 3)
        throw ShapeError(std::string(op) + ": expected an RGB image");
    if (!mask.aligned_with(img))
        throw ShapeError(std::string(op) + ": mask is not aligned with the image");
}

inline float clamp01d(double v)
{
    return static_cast<float>(std::clamp(v, 0.0, 1.0));
}

// Applies fn(r, g, b) -> {r, g, b} (doubles) to every selected pixel.
template <typename Fn>
Image map_masked(const Image& img, const Mask& mask, const char* op, Fn fn)
{
    require_rgb(img, mask, op);
    Image out = img;
    auto v = out.values();
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!mask.selected(i))
            continue;
        const auto r = fn(double(v[3 * i]), double(v[3 * i + 1]), double(v[3 * i + 2]));
        for (int c = 0; c < 3; ++c)
            v[3 * i + c] = clamp01d(r[c]);
    }
    return out;
}

} // namespace detail

/// v -> v^gamma inside the mask.
inline Image apply_gamma(const Image& img, const Mask& mask, double gamma)
{
    if (!(gamma > 0))
        throw Error("gamma must be positive");
    return detail::map_masked(img, mask, "apply_gamma", [&](double r, double g, double b) {
        return std::array{std::pow(r, gamma), std::pow(g, gamma), std::pow(b, gamma)};
    });
}

/// v -> clamp(c (v - 0.5) + 0.5 + b) inside the mask.
inline Image apply_brightness_contrast(const Image& img, const Mask& mask, double brightness, double contrast)
{
    // v + (c - 1)(v - 0.5) + b: exact for b = 0, c = 1.
    const auto f = [&](double v) { return v + (contrast - 1.0) * (v - 0.5) + brightness; };
    return detail::map_masked(img, mask, "apply_brightness_contrast",
                              [&](double r, double g, double b) { return std::array{f(r), f(g), f(b)}; });
}

struct Hsv {
    double h, s, v;
};

inline Hsv rgb_to_hsv(double r, double g, double b)
{
    const double mx = std::max({r, g, b});
    const double mn = std::min({r, g, b});
    const double d = mx - mn;
    Hsv o{0.0, mx > 0 ? d / mx : 0.0, mx};
    if (d > 0) {
        double h;
        if (mx == r)
            h = (g - b) / d;
        else if (mx == g)
            h = 2.0 + (b - r) / d;
        else
            h = 4.0 + (r - g) / d;
        h /= 6.0;
        o.h = h - std::floor(h);
    }
    return o;
}

inline std::array<double, 3> hsv_to_rgb(const Hsv& c)
{
    if (c.s <= 0)
        return {c.v, c.v, c.v};
    const double h6 = (c.h - std::floor(c.h)) * 6.0;
    const int i = static_cast<int>(std::floor(h6)) % 6;
    const double f = h6 - std::floor(h6);
    const double p = c.v * (1 - c.s);
    const double q = c.v * (1 - c.s * f);
    const double t = c.v * (1 - c.s * (1 - f));
    switch (i) {
    case 0: return {c.v, t, p};
    case 1: return {q, c.v, p};
    case 2: return {p, c.v, t};
    case 3: return {p, q, c.v};
    case 4: return {t, p, c.v};
    default: return {c.v, p, q};
    }
}

/// HSV jitter: hue rotated by hue_shift (turns), saturation scaled and clamped to [0,1].
inline Image apply_color_jitter(const Image& img, const Mask& mask, double hue_shift, double sat_scale)
{
    if (!(sat_scale >= 0))
        throw Error("saturation scale must be non-negative");
    return detail::map_masked(img, mask, "apply_color_jitter", [&](double r, double g, double b) {
        auto c = rgb_to_hsv(r, g, b);
        if (c.s <= 0)
            return std::array{r, g, b};
        c.h += hue_shift;
        c.s = std::min(c.s * sat_scale, 1.0);
        return hsv_to_rgb(c);
    });
}

/// s x s x s lattice of RGB outputs. Entry (ri, gi, bi) lives at ((bi * s) + gi) * s + ri.
struct Lut3d {
    int size = 0;
    std::vector<std::array<double, 3>> table;

    std::array<double, 3>& at(int r, int g, int b) { return table[(static_cast<std::size_t>(b) * size + g) * size + r]; }
    const std::array<double, 3>& at(int r, int g, int b) const
    {
        return table[(static_cast<std::size_t>(b) * size + g) * size + r];
    }

    void validate() const
    {
        if (size < 2)
            throw Error("3D LUT needs at least 2 nodes per axis");
        if (table.size() != static_cast<std::size_t>(size) * size * size)
            throw Error("3D LUT table has " + std::to_string(table.size()) + " entries, expected " +
                        std::to_string(size * size * size));
        for (const auto& e : table)
            for (double v : e)
                if (!std::isfinite(v))
                    throw Error("3D LUT contains a non-finite entry");
    }

    static Lut3d identity(int s)
    {
        Lut3d l{s, std::vector<std::array<double, 3>>(static_cast<std::size_t>(s) * s * s)};
        for (int b = 0; b < s; ++b)
            for (int g = 0; g < s; ++g)
                for (int r = 0; r < s; ++r)
                    l.at(r, g, b) = {double(r) / (s - 1), double(g) / (s - 1), double(b) / (s - 1)};
        return l;
    }
};

/// Trilinear lookup through the lattice inside the mask.
inline Image apply_lut3d(const Image& img, const Mask& mask, const Lut3d& lut)
{
    lut.validate();
    const int s = lut.size;
    const auto axis = [s](double v, int& i0, double& f) {
        const double x = std::clamp(v, 0.0, 1.0) * (s - 1);
        i0 = std::min(static_cast<int>(std::floor(x)), s - 2);
        f = x - i0;
    };
    return detail::map_masked(img, mask, "apply_lut3d", [&](double r, double g, double b) {
        int ri, gi, bi;
        double fr, fg, fb;
        axis(r, ri, fr);
        axis(g, gi, fg);
        axis(b, bi, fb);
        std::array<double, 3> out{0, 0, 0};
        for (int db = 0; db < 2; ++db)
            for (int dg = 0; dg < 2; ++dg)
                for (int dr = 0; dr < 2; ++dr) {
                    const double w = (dr ? fr : 1 - fr) * (dg ? fg : 1 - fg) * (db ? fb : 1 - fb);
                    const auto& e = lut.at(ri + dr, gi + dg, bi + db);
                    for (int c = 0; c < 3; ++c)
                        out[c] += w * e[c];
                }
        return out;
    });
}

enum class BlendMode { soft_light, dodge, grain_merge, grain_extract };

inline std::string_view blend_mode_name(BlendMode m)
{
    switch (m) {
    case BlendMode::soft_light: return "soft_light";
    case BlendMode::dodge: return "dodge";
    case BlendMode::grain_merge: return "grain_merge";
    default: return "grain_extract";
    }
}

inline BlendMode parse_blend_mode(std::string_view s)
{
    for (auto m : {BlendMode::soft_light, BlendMode::dodge, BlendMode::grain_merge, BlendMode::grain_extract})
        if (blend_mode_name(m) == s)
            return m;
    throw Error("unknown blend mode '" + std::string(s) + "'");
}

inline constexpr double kDodgeEpsilon = 1e-3;

/// Standard layer blend of base a with overlay b (unclamped).
inline double blend(BlendMode mode, double a, double b)
{
    switch (mode) {
    case BlendMode::soft_light:
        return b <= 0.5 ? 2 * a * b + a * a * (1 - 2 * b) : 2 * a * (1 - b) + std::sqrt(a) * (2 * b - 1);
    case BlendMode::dodge: return a / (1 - b + kDodgeEpsilon);
    case BlendMode::grain_merge: return a + (b - 0.5);
    default: return a - (b - 0.5);
    }
}

/// Blends a single-channel overlay into the masked pixels with per-pixel weight in [0,1]:
/// out = a + w (blend(a, o) - a), clamped.
inline Image apply_overlay(const Image& img, const Mask& mask, const Image& overlay, const Mask& weight,
                           BlendMode mode)
{
    detail::require_rgb(img, mask, "apply_overlay");
    if (overlay.channels() != 1 || overlay.height() != img.height() || overlay.width() != img.width() ||
        !weight.aligned_with(img))
        throw ShapeError("apply_overlay: overlay and weight must match the image size");
    Image out = img;
    auto v = out.values();
    const auto o = overlay.values();
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!mask.selected(i))
            continue;
        const double w = weight[i];
        for (int c = 0; c < 3; ++c) {
            const double a = v[3 * i + c];
            v[3 * i + c] = detail::clamp01d(a + w * (blend(mode, a, o[i]) - a));
        }
    }
    return out;
}

/// Smooth random field in [-1, 1]: uniform noise on a coarse grid, bilinearly upsampled.
inline Image smooth_noise(int h, int w, int grid, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Image coarse(grid, grid, 1);
    for (auto& v : coarse.values())
        v = static_cast<float>(u(rng));
    return resize(coarse, h, w, ResizeMethod::bilinear);
}

struct LocalLighting {
    Image overlay; ///< 1 channel, centred on 0.5
    Mask weight;   ///< smooth sub-mask of the foreground
};

/// Random low-frequency overlay with amplitude 0.5 * strength and a smooth sub-mask of fg_mask.
inline LocalLighting make_local_lighting(const Mask& fg_mask, double strength, std::uint64_t seed)
{
    if (fg_mask.count_selected() == 0)
        throw EmptyRegionError("local lighting needs a non-empty foreground");
    std::mt19937_64 rng(seed);
    const int h = fg_mask.height(), w = fg_mask.width();
    LocalLighting l{smooth_noise(h, w, 4, rng), Mask(h, w)};
    for (auto& v : l.overlay.values())
        v = static_cast<float>(0.5 + 0.5 * strength * v);
    // Sub-mask: soft threshold of a second field, then restricted to the foreground.
    const auto field = smooth_noise(h, w, 3, rng);
    const double bias = std::uniform_real_distribution<double>(0.0, 0.6)(rng);
    for (std::size_t i = 0; i < l.weight.size(); ++i)
        l.weight[i] = fg_mask.selected(i) ? static_cast<float>(std::clamp(2.0 * (field.values()[i] + bias), 0.0, 1.0))
                                          : 0.0f;
    return l;
}

inline Image apply_local_lighting(const Image& img, const Mask& fg_mask, BlendMode mode, double strength,
                                  std::uint64_t seed)
{
    detail::require_rgb(img, fg_mask, "apply_local_lighting");
    const auto l = make_local_lighting(fg_mask, strength, seed);
    return apply_overlay(img, fg_mask, l.overlay, l.weight, mode);
}

/// Random LUT: identity warped by a near-identity colour matrix, per-channel gamma and node noise.
inline Lut3d random_lut(double strength, std::uint64_t seed, int size = 8)
{
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    std::array<std::array<double, 3>, 3> m{};
    std::array<double, 3> gamma{};
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j)
            m[i][j] = (i == j ? 1.0 : 0.0) + 0.5 * strength * n(rng);
        gamma[i] = std::exp(strength * n(rng));
    }
    auto lut = Lut3d::identity(size);
    for (auto& e : lut.table) {
        std::array<double, 3> o{};
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j)
                o[i] += m[i][j] * e[j];
            o[i] = std::pow(std::clamp(o[i], 0.0, 1.0), gamma[i]) + 0.05 * strength * n(rng);
        }
        for (int i = 0; i < 3; ++i)
            e[i] = std::clamp(o[i], 0.0, 1.0);
    }
    return lut;
}

/// One augmentation drawn from the bank: op name, its parameters and the seed of any random field.
struct AugmentationDescriptor {
    std::string op;
    std::map<std::string, double> params;
    std::uint64_t seed = 0;

    double param(const std::string& k) const
    {
        const auto it = params.find(k);
        if (it == params.end())
            throw Error("augmentation '" + op + "' is missing parameter '" + k + "'");
        return it->second;
    }
    friend bool operator==(const AugmentationDescriptor&, const AugmentationDescriptor&) = default;
};

inline void to_json(nlohmann::json& j, const AugmentationDescriptor& d)
{
    j = nlohmann::json{{"op", d.op}, {"params", d.params}, {"seed", d.seed}};
}

inline void from_json(const nlohmann::json& j, AugmentationDescriptor& d)
{
    j.at("op").get_to(d.op);
    d.params = j.value("params", std::map<std::string, double>{});
    d.seed = j.value("seed", std::uint64_t{0});
}

inline const std::array<std::string_view, 8>& augmentation_ops()
{
    static const std::array<std::string_view, 8> ops{"brightness_contrast", "color_jitter",      "gamma",
                                                     "lut3d",               "local_soft_light",  "local_dodge",
                                                     "local_grain_merge",   "local_grain_extract"};
    return ops;
}

struct ParamRange {
    const char* name;
    double lo, hi;
};

/// Declared parameter ranges per op.
inline std::vector<ParamRange> augmentation_ranges(std::string_view op)
{
    if (op == "brightness_contrast")
        return {{"brightness", -0.3, 0.3}, {"contrast", 0.6, 1.6}};
    if (op == "color_jitter")
        return {{"hue_shift", -0.1, 0.1}, {"sat_scale", 0.5, 1.5}};
    if (op == "gamma")
        return {{"gamma", 0.4, 2.5}};
    if (op == "lut3d")
        return {{"strength", 0.1, 0.4}};
    if (op.starts_with("local_"))
        return {{"strength", 0.2, 1.0}};
    throw Error("unknown augmentation '" + std::string(op) + "'");
}

/// Uniform choice over the bank, parameters uniform within their ranges.
inline AugmentationDescriptor sample_augmentation(std::mt19937_64& rng)
{
    const auto& ops = augmentation_ops();
    AugmentationDescriptor d;
    d.op = std::string(ops[std::uniform_int_distribution<std::size_t>(0, ops.size() - 1)(rng)]);
    for (const auto& r : augmentation_ranges(d.op))
        d.params[r.name] = std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
    d.seed = rng();
    return d;
}

inline Image apply_augmentation(const Image& img, const Mask& mask, const AugmentationDescriptor& d)
{
    if (d.op == "brightness_contrast")
        return apply_brightness_contrast(img, mask, d.param("brightness"), d.param("contrast"));
    if (d.op == "color_jitter")
        return apply_color_jitter(img, mask, d.param("hue_shift"), d.param("sat_scale"));
    if (d.op == "gamma")
        return apply_gamma(img, mask, d.param("gamma"));
    if (d.op == "lut3d")
        return apply_lut3d(img, mask, random_lut(d.param("strength"), d.seed));
    if (d.op.starts_with("local_"))
        return apply_local_lighting(img, mask, parse_blend_mode(d.op.substr(6)), d.param("strength"), d.seed);
    throw Error("unknown augmentation '" + d.op + "'");
}

} // namespace iharmon::synthesis
