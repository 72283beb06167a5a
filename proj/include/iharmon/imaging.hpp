#pragma once

// Image containers and the elementary image math every other module builds on.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "iharmon/error.hpp"

namespace iharmon {

/// H x W x C image stored row-major with interleaved channels.
template <typename T>
class basic_image {
public:
    using value_type = T;

    basic_image() = default;
    basic_image(int height, int width, int channels, T fill = T(0))
        : height_(height), width_(width), channels_(channels),
          data_(static_cast<std::size_t>(height) * width * channels, fill)
    {
        if (height < 1 || width < 1 || channels < 1)
            throw ShapeError("image dimensions must be positive");
    }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    int channels() const noexcept { return channels_; }
    std::size_t pixel_count() const noexcept { return static_cast<std::size_t>(height_) * width_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& at(int y, int x, int c = 0) { return data_[index(y, x, c)]; }
    const T& at(int y, int x, int c = 0) const { return data_[index(y, x, c)]; }

    T* pixel(int y, int x) { return data_.data() + index(y, x, 0); }
    const T* pixel(int y, int x) const { return data_.data() + index(y, x, 0); }

    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    std::vector<T>& storage() noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    bool same_shape(const basic_image& o) const noexcept
    {
        return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
    }

    friend bool operator==(const basic_image&, const basic_image&) = default;

private:
    std::size_t index(int y, int x, int c) const noexcept
    {
        return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
    }

    int height_ = 0;
    int width_ = 0;
    int channels_ = 0;
    std::vector<T> data_;
};

/// Single-channel weight map in [0,1] annotating an image region.
template <typename T>
class basic_mask {
public:
    using value_type = T;

    basic_mask() = default;
    basic_mask(int height, int width, T fill = T(0))
        : height_(height), width_(width), data_(static_cast<std::size_t>(height) * width, fill)
    {
        if (height < 1 || width < 1)
            throw ShapeError("mask dimensions must be positive");
    }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    std::size_t size() const noexcept { return data_.size(); }

    T& at(int y, int x) { return data_[static_cast<std::size_t>(y) * width_ + x]; }
    const T& at(int y, int x) const { return data_[static_cast<std::size_t>(y) * width_ + x]; }
    T& operator[](std::size_t i) { return data_[i]; }
    const T& operator[](std::size_t i) const { return data_[i]; }

    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }

    bool selected(std::size_t i) const noexcept { return data_[i] > T(0.5); }

    std::size_t count_selected() const noexcept
    {
        return static_cast<std::size_t>(
            std::count_if(data_.begin(), data_.end(), [](T v) { return v > T(0.5); }));
    }

    template <typename Image>
    bool aligned_with(const Image& img) const noexcept
    {
        return height_ == img.height() && width_ == img.width();
    }

    friend bool operator==(const basic_mask&, const basic_mask&) = default;

private:
    int height_ = 0;
    int width_ = 0;
    std::vector<T> data_;
};

using Image = basic_image<float>;
using Mask = basic_mask<float>;

template <typename U, typename T>
basic_image<U> image_cast(const basic_image<T>& img)
{
    basic_image<U> out(img.height(), img.width(), img.channels());
    std::transform(img.values().begin(), img.values().end(), out.values().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
}

template <typename U, typename T>
basic_mask<U> mask_cast(const basic_mask<T>& m)
{
    basic_mask<U> out(m.height(), m.width());
    std::transform(m.values().begin(), m.values().end(), out.values().begin(),
                   [](T v) { return static_cast<U>(v); });
    return out;
}

template <typename T>
basic_image<T> mask_to_image(const basic_mask<T>& m)
{
    basic_image<T> out(m.height(), m.width(), 1);
    std::copy(m.values().begin(), m.values().end(), out.values().begin());
    return out;
}

template <typename T>
basic_mask<T> image_to_mask(const basic_image<T>& img)
{
    if (img.channels() != 1)
        throw ShapeError("mask must be single-channel");
    basic_mask<T> out(img.height(), img.width());
    std::copy(img.values().begin(), img.values().end(), out.values().begin());
    return out;
}

/// Hard 0/1 version of a soft mask (value > 0.5 is selected).
template <typename T>
basic_mask<T> binarize(const basic_mask<T>& m)
{
    basic_mask<T> out(m.height(), m.width());
    for (std::size_t i = 0; i < m.size(); ++i)
        out[i] = m.selected(i) ? T(1) : T(0);
    return out;
}

template <typename T>
basic_mask<T> invert(const basic_mask<T>& m)
{
    basic_mask<T> out(m.height(), m.width());
    for (std::size_t i = 0; i < m.size(); ++i)
        out[i] = T(1) - m[i];
    return out;
}

template <typename T>
basic_image<T> clamp01(basic_image<T> img)
{
    for (auto& v : img.values())
        v = std::clamp(v, T(0), T(1));
    return img;
}

// ---------------------------------------------------------------------------
// Luminance and region statistics

inline constexpr double kLumaR = 0.299;
inline constexpr double kLumaG = 0.587;
inline constexpr double kLumaB = 0.114;

/// Rec. 601 luma. Single-channel input is returned as a copy.
template <typename T>
basic_image<T> to_luminance(const basic_image<T>& img)
{
    if (img.channels() == 1)
        return img;
    if (img.channels() != 3)
        throw ShapeError("to_luminance expects 1 or 3 channels");
    basic_image<T> out(img.height(), img.width(), 1);
    const auto src = img.values();
    auto dst = out.values();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        const T l = T(kLumaR) * src[3 * i] + T(kLumaG) * src[3 * i + 1] + T(kLumaB) * src[3 * i + 2];
        dst[i] = std::clamp(l, T(0), T(1));
    }
    return out;
}

/// Values of a single-channel image at mask > 0.5, in raster order.
template <typename T, typename M>
std::vector<T> gather_masked(const basic_image<T>& values, const basic_mask<M>& mask)
{
    if (values.channels() != 1)
        throw ShapeError("expected a single-channel image");
    if (!mask.aligned_with(values))
        throw ShapeError("mask is not aligned with image");
    std::vector<T> out;
    const auto v = values.values();
    for (std::size_t i = 0; i < v.size(); ++i)
        if (mask.selected(i))
            out.push_back(v[i]);
    return out;
}

/// Position of the p-th percentile in a sorted sample of size n: the two
/// order statistics bracketing it and the interpolation weight of the upper one.
struct PercentileRank {
    std::size_t lower;
    std::size_t upper;
    double frac;
};

inline PercentileRank percentile_rank(std::size_t n, double p)
{
    if (n == 0)
        throw EmptyRegionError();
    if (!(p >= 0.0 && p <= 100.0))
        throw Error("percentile must lie in [0, 100]");
    const double rank = p / 100.0 * static_cast<double>(n - 1);
    const auto lower = static_cast<std::size_t>(std::floor(rank));
    const std::size_t upper = std::min(lower + 1, n - 1);
    return {lower, upper, rank - static_cast<double>(lower)};
}

/// p-th percentile of the sample, linear interpolation between closest ranks.
template <typename T>
double percentile(std::vector<T> sample, double p)
{
    const auto r = percentile_rank(sample.size(), p);
    std::sort(sample.begin(), sample.end());
    const double lo = sample[r.lower];
    const double hi = sample[r.upper];
    return lo + r.frac * (hi - lo);
}

template <typename T, typename M>
double masked_percentile(const basic_image<T>& values, const basic_mask<M>& mask, double p)
{
    auto sample = gather_masked(values, mask);
    if (sample.empty())
        throw EmptyRegionError();
    return percentile(std::move(sample), p);
}

template <typename T, typename M>
double masked_mean(const basic_image<T>& values, const basic_mask<M>& mask)
{
    const auto sample = gather_masked(values, mask);
    if (sample.empty())
        throw EmptyRegionError();
    double sum = 0.0;
    for (T v : sample)
        sum += static_cast<double>(v);
    return sum / static_cast<double>(sample.size());
}

// ---------------------------------------------------------------------------
// Compositing and resampling

/// out = mask * fg + (1 - mask) * bg, per channel.
template <typename T, typename M>
basic_image<T> alpha_composite(const basic_image<T>& fg, const basic_image<T>& bg,
                               const basic_mask<M>& mask)
{
    if (!fg.same_shape(bg) || !mask.aligned_with(fg))
        throw ShapeError("alpha_composite: inputs are not aligned");
    basic_image<T> out(fg.height(), fg.width(), fg.channels());
    const int c = fg.channels();
    const auto f = fg.values();
    const auto b = bg.values();
    auto o = out.values();
    for (std::size_t i = 0; i < mask.size(); ++i) {
        const T a = static_cast<T>(mask[i]);
        for (int k = 0; k < c; ++k) {
            const std::size_t j = i * c + k;
            o[j] = a * f[j] + (T(1) - a) * b[j];
        }
    }
    return out;
}

template <typename T>
basic_image<T> multiply_mask(const basic_image<T>& img, const basic_mask<T>& mask)
{
    if (!mask.aligned_with(img))
        throw ShapeError("mask is not aligned with image");
    basic_image<T> out = img;
    const int c = img.channels();
    auto o = out.values();
    for (std::size_t i = 0; i < mask.size(); ++i)
        for (int k = 0; k < c; ++k)
            o[i * c + k] *= mask[i];
    return out;
}

enum class ResizeMethod { bilinear, nearest };

namespace detail {

struct LinearTap {
    int i0;
    int i1;
    double w1;
};

// Half-pixel-centre sampling positions, edges clamped.
inline std::vector<LinearTap> linear_taps(int in, int out)
{
    std::vector<LinearTap> taps(static_cast<std::size_t>(out));
    const double scale = static_cast<double>(in) / out;
    for (int d = 0; d < out; ++d) {
        double s = (d + 0.5) * scale - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(in - 1));
        const int i0 = static_cast<int>(std::floor(s));
        const int i1 = std::min(i0 + 1, in - 1);
        taps[d] = {i0, i1, s - i0};
    }
    return taps;
}

} // namespace detail

template <typename T>
basic_image<T> resize(const basic_image<T>& img, int out_h, int out_w,
                      ResizeMethod method = ResizeMethod::bilinear)
{
    if (out_h < 1 || out_w < 1)
        throw ShapeError("resize target must be at least 1x1");
    if (out_h == img.height() && out_w == img.width())
        return img;
    const int c = img.channels();
    basic_image<T> out(out_h, out_w, c);
    if (method == ResizeMethod::nearest) {
        const double sy = static_cast<double>(img.height()) / out_h;
        const double sx = static_cast<double>(img.width()) / out_w;
        for (int y = 0; y < out_h; ++y) {
            const int iy = std::min(static_cast<int>((y + 0.5) * sy), img.height() - 1);
            for (int x = 0; x < out_w; ++x) {
                const int ix = std::min(static_cast<int>((x + 0.5) * sx), img.width() - 1);
                std::copy_n(img.pixel(iy, ix), c, out.pixel(y, x));
            }
        }
        return out;
    }
    const auto ty = detail::linear_taps(img.height(), out_h);
    const auto tx = detail::linear_taps(img.width(), out_w);
    for (int y = 0; y < out_h; ++y) {
        const auto& a = ty[y];
        for (int x = 0; x < out_w; ++x) {
            const auto& b = tx[x];
            for (int k = 0; k < c; ++k) {
                const double top = (1.0 - b.w1) * img.at(a.i0, b.i0, k) + b.w1 * img.at(a.i0, b.i1, k);
                const double bot = (1.0 - b.w1) * img.at(a.i1, b.i0, k) + b.w1 * img.at(a.i1, b.i1, k);
                out.at(y, x, k) = static_cast<T>((1.0 - a.w1) * top + a.w1 * bot);
            }
        }
    }
    return out;
}

/// Bilinear resize of a mask; `binary` re-thresholds the result at 0.5.
template <typename T>
basic_mask<T> resize_mask(const basic_mask<T>& m, int out_h, int out_w, bool binary = true)
{
    auto out = image_to_mask(resize(mask_to_image(m), out_h, out_w, ResizeMethod::bilinear));
    return binary ? binarize(out) : out;
}

/// Value/shape invariants of a public Image: finite values in [0,1].
template <typename T>
bool is_valid_image(const basic_image<T>& img)
{
    if (img.empty())
        return false;
    return std::all_of(img.values().begin(), img.values().end(),
                       [](T v) { return std::isfinite(static_cast<double>(v)) && v >= T(0) && v <= T(1); });
}

} // namespace iharmon
