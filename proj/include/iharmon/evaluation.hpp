#pragma once

// Full-reference quality metrics and a dataset sweep producing one row per method.
// Metrics read every pixel as its 8-bit value round(255 v).

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iharmon/error.hpp"
#include "iharmon/image_io.hpp"
#include "iharmon/imaging.hpp"
#include "iharmon/inference.hpp"
#include "iharmon/synthesis/dataset.hpp"

namespace iharmon {

inline constexpr double kPsnrCap = 100.0;
inline constexpr int kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimC1 = (0.01 * 255) * (0.01 * 255);
inline constexpr double kSsimC2 = (0.03 * 255) * (0.03 * 255);

namespace detail {

inline void check_aligned(const Image& a, const Image& b, const char* what)
{
    if (!a.same_shape(b))
        throw ShapeError(std::string(what) + ": images are not aligned");
}

inline double byte(float v)
{
    return static_cast<double>(to_byte(v));
}

} // namespace detail

/// Mean squared error on the 0-255 scale.
inline double mse(const Image& a, const Image& b)
{
    detail::check_aligned(a, b, "mse");
    double acc = 0.0;
    const auto x = a.values();
    const auto y = b.values();
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = detail::byte(x[i]) - detail::byte(y[i]);
        acc += d * d;
    }
    return x.empty() ? 0.0 : acc / static_cast<double>(x.size());
}

inline double masked_mse(const Image& a, const Image& b, const Mask& region)
{
    detail::check_aligned(a, b, "masked_mse");
    if (!region.aligned_with(a))
        throw ShapeError("masked_mse: region is not aligned");
    const int C = a.channels();
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < region.size(); ++i) {
        if (!region.selected(i))
            continue;
        for (int c = 0; c < C; ++c, ++n) {
            const double d = detail::byte(a.values()[i * C + c]) - detail::byte(b.values()[i * C + c]);
            acc += d * d;
        }
    }
    if (n == 0)
        throw EmptyRegionError("masked_mse: empty region");
    return acc / static_cast<double>(n);
}

inline double psnr_from_mse(double m)
{
    if (m <= 0.0)
        return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(255.0 * 255.0 / m));
}

inline double psnr(const Image& a, const Image& b)
{
    return psnr_from_mse(mse(a, b));
}

namespace detail {

inline std::vector<double> gaussian_window()
{
    std::vector<double> g(kSsimWindow);
    double sum = 0;
    for (int i = 0; i < kSsimWindow; ++i) {
        const double d = i - kSsimWindow / 2;
        g[i] = std::exp(-d * d / (2 * kSsimSigma * kSsimSigma));
        sum += g[i];
    }
    for (auto& v : g)
        v /= sum;
    return g;
}

// Luminance on the 0-255 scale.
inline std::vector<double> luma255(const Image& img)
{
    std::vector<double> out(img.pixel_count());
    const int C = img.channels();
    const auto v = img.values();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = C == 1 ? byte(v[i])
                        : kLumaR * byte(v[i * C]) + kLumaG * byte(v[i * C + 1]) + kLumaB * byte(v[i * C + 2]);
    return out;
}

// Separable "valid" filtering: (h-10) x (w-10) outputs.
inline std::vector<double> filter_valid(const std::vector<double>& x, int h, int w, const std::vector<double>& g)
{
    const int k = kSsimWindow;
    const int oh = h - k + 1, ow = w - k + 1;
    std::vector<double> tmp(static_cast<std::size_t>(h) * ow);
    for (int y = 0; y < h; ++y)
        for (int c = 0; c < ow; ++c) {
            double s = 0;
            for (int i = 0; i < k; ++i)
                s += g[i] * x[static_cast<std::size_t>(y) * w + c + i];
            tmp[static_cast<std::size_t>(y) * ow + c] = s;
        }
    std::vector<double> out(static_cast<std::size_t>(oh) * ow);
    for (int r = 0; r < oh; ++r)
        for (int c = 0; c < ow; ++c) {
            double s = 0;
            for (int i = 0; i < k; ++i)
                s += g[i] * tmp[static_cast<std::size_t>(r + i) * ow + c];
            out[static_cast<std::size_t>(r) * ow + c] = s;
        }
    return out;
}

} // namespace detail

/// Structural similarity on luminance, 11x11 Gaussian window, mean over window positions.
inline double ssim(const Image& a, const Image& b)
{
    detail::check_aligned(a, b, "ssim");
    const int h = a.height(), w = a.width();
    if (h < kSsimWindow || w < kSsimWindow)
        throw ShapeError("ssim: image is smaller than the 11x11 window");
    const auto g = detail::gaussian_window();
    const auto x = detail::luma255(a);
    const auto y = detail::luma255(b);
    std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    const auto mx = detail::filter_valid(x, h, w, g);
    const auto my = detail::filter_valid(y, h, w, g);
    const auto sxx = detail::filter_valid(xx, h, w, g);
    const auto syy = detail::filter_valid(yy, h, w, g);
    const auto sxy = detail::filter_valid(xy, h, w, g);
    double acc = 0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
        const double vx = sxx[i] - mx[i] * mx[i];
        const double vy = syy[i] - my[i] * my[i];
        const double cxy = sxy[i] - mx[i] * my[i];
        acc += ((2 * mx[i] * my[i] + kSsimC1) * (2 * cxy + kSsimC2)) /
               ((mx[i] * mx[i] + my[i] * my[i] + kSsimC1) * (vx + vy + kSsimC2));
    }
    return acc / static_cast<double>(mx.size());
}

// ---------------------------------------------------------------------------
// Dataset sweep

struct ImageMetrics {
    std::string id;
    double psnr = 0;
    double ssim = 0;
    double mse = 0;
};

struct MetricsRow {
    std::string method;
    double psnr = 0;
    double ssim = 0;
    double mse = 0;
    std::size_t n_images = 0;
    std::size_t skipped = 0;
    std::vector<ImageMetrics> images;
};

inline void to_json(nlohmann::json& j, const ImageMetrics& m)
{
    j = {{"id", m.id}, {"psnr", m.psnr}, {"ssim", m.ssim}, {"mse", m.mse}};
}

inline void to_json(nlohmann::json& j, const MetricsRow& r)
{
    j = {{"method", r.method}, {"psnr", r.psnr},        {"ssim", r.ssim},
         {"mse", r.mse},       {"n_images", r.n_images}, {"skipped", r.skipped}};
}

struct EvalOptions {
    int resolution = 0;          ///< 0 = stored resolution, otherwise square resize
    bool foreground_only = false; ///< psnr/mse over the foreground; ssim stays whole-image
};

/// Produces the harmonized image for one sample.
using Method = std::function<Image(const synthesis::CompositeSample&)>;

inline Image direct_composite(const synthesis::CompositeSample& s)
{
    return s.composite;
}

/// Runs the harmonizer with the sample's guide mask; output rounded to 8 bits as if saved.
inline Method harmonizer_method(const Harmonizer& h)
{
    return [&h](const synthesis::CompositeSample& s) {
        HarmonizeRequest req;
        req.composite = s.composite;
        req.fg_mask = s.fg_mask;
        req.guide_mask = s.guide_mask;
        return quantize8(h.run(req).output);
    };
}

inline ImageMetrics image_metrics(const std::string& id, const Image& out, const synthesis::CompositeSample& s,
                                  const EvalOptions& opt = {})
{
    ImageMetrics m;
    m.id = id;
    m.mse = opt.foreground_only ? masked_mse(out, s.ground_truth, s.fg_mask) : mse(out, s.ground_truth);
    m.psnr = psnr_from_mse(m.mse);
    m.ssim = ssim(out, s.ground_truth);
    return m;
}

/// Averages per-image metrics over the set; unreadable or failing records are skipped and counted.
/// The reduction runs in id order, so the row does not depend on manifest order.
inline MetricsRow evaluate(const std::string& label, const Method& method,
                           const std::vector<synthesis::CompositeSample>& samples, const EvalOptions& opt = {},
                           std::size_t already_skipped = 0)
{
    MetricsRow row;
    row.method = label;
    row.skipped = already_skipped;
    for (const auto& raw : samples) {
        try {
            synthesis::CompositeSample s = raw;
            if (opt.resolution > 0) {
                const int r = opt.resolution;
                s.composite = resize(raw.composite, r, r);
                s.ground_truth = resize(raw.ground_truth, r, r);
                s.fg_mask = resize_mask(raw.fg_mask, r, r);
                s.guide_mask = resize_mask(raw.guide_mask, r, r);
            }
            row.images.push_back(image_metrics(s.meta.id, method(s), s, opt));
        } catch (const Error&) {
            ++row.skipped;
        }
    }
    std::sort(row.images.begin(), row.images.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    for (const auto& m : row.images) {
        row.psnr += m.psnr;
        row.ssim += m.ssim;
        row.mse += m.mse;
    }
    row.n_images = row.images.size();
    if (row.n_images > 0) {
        const auto n = static_cast<double>(row.n_images);
        row.psnr /= n;
        row.ssim /= n;
        row.mse /= n;
    }
    return row;
}

/// Loads every readable record of a dataset directory; returns the number skipped.
inline std::size_t load_eval_set(const std::filesystem::path& dir, std::vector<synthesis::CompositeSample>& out)
{
    std::size_t skipped = 0;
    for (const auto& r : synthesis::read_manifest(dir).records) {
        try {
            out.push_back(synthesis::read_sample(dir / r.id, r));
        } catch (const Error&) {
            ++skipped;
        }
    }
    return skipped;
}

inline MetricsRow evaluate(const std::string& label, const Method& method, const std::filesystem::path& dataset_dir,
                           const EvalOptions& opt = {})
{
    std::vector<synthesis::CompositeSample> samples;
    const auto skipped = load_eval_set(dataset_dir, samples);
    return evaluate(label, method, samples, opt, skipped);
}

inline nlohmann::json report_json(const std::vector<MetricsRow>& rows)
{
    nlohmann::json j{{"rows", nlohmann::json::array()}, {"images", nlohmann::json::object()}};
    for (const auto& r : rows) {
        j["rows"].push_back(r);
        j["images"][r.method] = r.images;
    }
    return j;
}

} // namespace iharmon
