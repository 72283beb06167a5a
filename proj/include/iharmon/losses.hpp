#pragma once

// Training objective: L1 harmonization loss, luminance matching (highlight,
// mid-tone, shadow), style-code consistency and the two triplet losses.
//
// Every loss is a template over the scalar type so the same code serves float
// training and double-precision gradient checks. Gradients are accumulated
// (+=) into optional output buffers, scaled by the caller-supplied factor.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "iharmon/error.hpp"
#include "iharmon/imaging.hpp"

namespace iharmon {

struct LossWeights {
    double alpha = 1.0;   ///< luminance matching
    double lambda = 1.0;  ///< consistency
    double beta = 0.01;   ///< triplet pair
    double margin = 0.1;  ///< triplet margin m
    double p_hi = 90.0;   ///< highlight percentile
    double p_lo = 10.0;   ///< shadow percentile

    void validate() const
    {
        if (alpha < 0 || lambda < 0 || beta < 0)
            throw Error("loss weights must be non-negative");
        if (!(0.0 <= p_lo && p_lo < p_hi && p_hi <= 100.0))
            throw Error("loss percentiles must satisfy 0 <= p_lo < p_hi <= 100");
        if (!(margin > 0))
            throw Error("triplet margin must be positive");
    }
};

inline void to_json(nlohmann::json& j, const LossWeights& w)
{
    j = nlohmann::json{{"alpha", w.alpha}, {"lambda", w.lambda}, {"beta", w.beta},
                       {"margin", w.margin}, {"p_hi", w.p_hi}, {"p_lo", w.p_lo}};
}

inline void from_json(const nlohmann::json& j, LossWeights& w)
{
    const LossWeights d;
    w.alpha = j.value("alpha", d.alpha);
    w.lambda = j.value("lambda", d.lambda);
    w.beta = j.value("beta", d.beta);
    w.margin = j.value("margin", d.margin);
    w.p_hi = j.value("p_hi", d.p_hi);
    w.p_lo = j.value("p_lo", d.p_lo);
}

struct LossReport {
    double harmonization = 0;
    double highlight = 0;
    double mid_tone = 0;
    double shadow = 0;
    double lm = 0;
    double consistency = 0;
    double triplet1 = 0;
    double triplet2 = 0;
    double total = 0;
};

inline void to_json(nlohmann::json& j, const LossReport& r)
{
    j = nlohmann::json{{"harmonization", r.harmonization}, {"highlight", r.highlight}, {"mid_tone", r.mid_tone},
                       {"shadow", r.shadow},               {"lm", r.lm},               {"consistency", r.consistency},
                       {"triplet1", r.triplet1},           {"triplet2", r.triplet2},   {"total", r.total}};
}

namespace detail {

template <typename T>
T sign_of(T v)
{
    return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0));
}

// Masked luminance of an RGB image together with the raster index of each sample.
template <typename T>
struct LumaSample {
    std::vector<T> value;
    std::vector<std::size_t> pixel;
};

template <typename T>
LumaSample<T> masked_luma(const basic_image<T>& img, const basic_mask<T>& mask)
{
    LumaSample<T> s;
    const auto v = img.values();
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (!mask.selected(i))
            continue;
        s.value.push_back(T(kLumaR) * v[3 * i] + T(kLumaG) * v[3 * i + 1] + T(kLumaB) * v[3 * i + 2]);
        s.pixel.push_back(i);
    }
    return s;
}

// Percentile of the sample plus d(percentile)/d(sample[k]) as (k, weight) pairs.
template <typename T>
T percentile_with_grad(const std::vector<T>& value, double p, std::array<std::pair<std::size_t, T>, 2>& grad)
{
    std::vector<std::size_t> order(value.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return value[a] < value[b]; });
    const auto r = percentile_rank(value.size(), p);
    const T frac = static_cast<T>(r.frac);
    const T lo = value[order[r.lower]];
    const T hi = value[order[r.upper]];
    grad[0] = {order[r.lower], T(1) - frac};
    grad[1] = {order[r.upper], frac};
    return lo + frac * (hi - lo);
}

template <typename T>
void check_codes(std::span<const T> a, std::span<const T> b)
{
    if (a.size() != b.size())
        throw ShapeError("style code dimension mismatch");
    if (a.empty())
        throw ShapeError("empty style code");
}

template <typename T>
T l2_distance(std::span<const T> a, std::span<const T> b)
{
    T s = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

// Accumulates scale * d||a - b||_2 / da into ga and the opposite into gb.
template <typename T>
void l2_distance_grad(std::span<const T> a, std::span<const T> b, T dist, T scale, T* ga, T* gb)
{
    if (dist <= T(0))
        return;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const T g = scale * (a[i] - b[i]) / dist;
        if (ga)
            ga[i] += g;
        if (gb)
            gb[i] -= g;
    }
}

} // namespace detail

template <typename T>
struct LuminanceMatchTerms {
    T highlight = 0;
    T mid_tone = 0;
    T shadow = 0;
    T lm = 0;
};

/// Highlight / mid-tone / shadow gaps between the foreground luminance of pred and gt.
/// When grad_pred is given, accumulates scale[0] * d highlight + scale[1] * d mid_tone
/// + scale[2] * d shadow with respect to pred.
template <typename T>
LuminanceMatchTerms<T> luminance_matching_loss(const basic_image<T>& pred, const basic_image<T>& gt,
                                               const basic_mask<T>& fg_mask, const LossWeights& w,
                                               basic_image<T>* grad_pred = nullptr,
                                               std::array<T, 3> scale = {T(1), T(1), T(1)})
{
    if (!pred.same_shape(gt) || pred.channels() != 3 || !fg_mask.aligned_with(pred))
        throw ShapeError("luminance_matching_loss: inputs are not aligned RGB images");
    const auto lp = detail::masked_luma(pred, fg_mask);
    const auto lg = detail::masked_luma(gt, fg_mask);
    if (lp.value.empty())
        throw EmptyRegionError();

    std::array<std::pair<std::size_t, T>, 2> gp_hi{}, gp_lo{}, unused{};
    const T hi_p = detail::percentile_with_grad(lp.value, w.p_hi, gp_hi);
    const T lo_p = detail::percentile_with_grad(lp.value, w.p_lo, gp_lo);
    const T hi_g = detail::percentile_with_grad(lg.value, w.p_hi, unused);
    const T lo_g = detail::percentile_with_grad(lg.value, w.p_lo, unused);
    const T n = static_cast<T>(lp.value.size());
    const T mean_p = std::accumulate(lp.value.begin(), lp.value.end(), T(0)) / n;
    const T mean_g = std::accumulate(lg.value.begin(), lg.value.end(), T(0)) / n;

    LuminanceMatchTerms<T> out;
    out.highlight = std::abs(hi_p - hi_g);
    out.mid_tone = std::abs(mean_p - mean_g);
    out.shadow = std::abs(lo_p - lo_g);
    out.lm = out.highlight + out.mid_tone + out.shadow;

    if (grad_pred) {
        if (!grad_pred->same_shape(pred))
            throw ShapeError("luminance_matching_loss: gradient buffer shape mismatch");
        auto g = grad_pred->values();
        const std::array<T, 3> luma{T(kLumaR), T(kLumaG), T(kLumaB)};
        auto push = [&](std::size_t k, T dl) {
            const std::size_t px = lp.pixel[k];
            for (int c = 0; c < 3; ++c)
                g[3 * px + c] += dl * luma[c];
        };
        const T s_hi = scale[0] * detail::sign_of(hi_p - hi_g);
        const T s_mid = scale[1] * detail::sign_of(mean_p - mean_g);
        const T s_lo = scale[2] * detail::sign_of(lo_p - lo_g);
        for (const auto& [k, wgt] : gp_hi)
            push(k, s_hi * wgt);
        for (const auto& [k, wgt] : gp_lo)
            push(k, s_lo * wgt);
        if (s_mid != T(0))
            for (std::size_t k = 0; k < lp.value.size(); ++k)
                push(k, s_mid / n);
    }
    return out;
}

/// Mean absolute difference between two style codes.
template <typename T>
T consistency_loss(std::span<const T> code_h, std::span<const T> code_b, T* grad_h = nullptr, T* grad_b = nullptr,
                   T scale = T(1))
{
    detail::check_codes(code_h, code_b);
    const T d = static_cast<T>(code_h.size());
    T s = 0;
    for (std::size_t i = 0; i < code_h.size(); ++i) {
        const T diff = code_h[i] - code_b[i];
        s += std::abs(diff);
        const T g = scale * detail::sign_of(diff) / d;
        if (grad_h)
            grad_h[i] += g;
        if (grad_b)
            grad_b[i] -= g;
    }
    return s / d;
}

/// Mean absolute error over every pixel and channel.
template <typename T>
T harmonization_loss(const basic_image<T>& pred, const basic_image<T>& gt, basic_image<T>* grad_pred = nullptr,
                     T scale = T(1))
{
    if (!pred.same_shape(gt))
        throw ShapeError("harmonization_loss: shape mismatch");
    const auto p = pred.values();
    const auto q = gt.values();
    const T n = static_cast<T>(p.size());
    T s = 0;
    for (std::size_t i = 0; i < p.size(); ++i)
        s += std::abs(p[i] - q[i]);
    if (grad_pred) {
        if (!grad_pred->same_shape(pred))
            throw ShapeError("harmonization_loss: gradient buffer shape mismatch");
        auto g = grad_pred->values();
        for (std::size_t i = 0; i < p.size(); ++i)
            g[i] += scale * detail::sign_of(p[i] - q[i]) / n;
    }
    return s / n;
}

/// Gradient buffers for the four codes of the triplet losses; any may be null.
template <typename T>
struct TripletGrads {
    T* h = nullptr;
    T* b = nullptr;
    T* c = nullptr;
    T* r = nullptr;
};

/// t1 = max(|h - b| - |h - c| + m, 0) and t2 = max(|h - r| - |h - c| + m, 0).
/// Gradients accumulate scale[0] * d t1 + scale[1] * d t2.
template <typename T>
std::pair<T, T> triplet_losses(std::span<const T> h, std::span<const T> b, std::span<const T> c,
                               std::span<const T> r, T margin, TripletGrads<T> grads = {},
                               std::array<T, 2> scale = {T(1), T(1)})
{
    detail::check_codes(h, b);
    detail::check_codes(h, c);
    detail::check_codes(h, r);
    const T d_hb = detail::l2_distance(h, b);
    const T d_hc = detail::l2_distance(h, c);
    const T d_hr = detail::l2_distance(h, r);
    const T a1 = d_hb - d_hc + margin;
    const T a2 = d_hr - d_hc + margin;
    const T t1 = std::max(a1, T(0));
    const T t2 = std::max(a2, T(0));
    if (a1 > T(0)) {
        detail::l2_distance_grad(h, b, d_hb, scale[0], grads.h, grads.b);
        detail::l2_distance_grad(h, c, d_hc, -scale[0], grads.h, grads.c);
    }
    if (a2 > T(0)) {
        detail::l2_distance_grad(h, r, d_hr, scale[1], grads.h, grads.r);
        detail::l2_distance_grad(h, c, d_hc, -scale[1], grads.h, grads.c);
    }
    return {t1, t2};
}

/// Inputs to the full objective. `harmonized` is the complete output image
/// (prediction composited onto the background).
template <typename T>
struct LossInputs {
    const basic_image<T>* harmonized = nullptr;
    const basic_image<T>* ground_truth = nullptr;
    const basic_mask<T>* fg_mask = nullptr;
    std::span<const T> code_h; ///< harmonized foreground
    std::span<const T> code_b; ///< reference region
    std::span<const T> code_c; ///< composite foreground
    std::span<const T> code_r; ///< real (ground-truth) foreground
};

template <typename T>
struct LossGradients {
    basic_image<T> harmonized;
    std::vector<T> code_h, code_b, code_c, code_r;
};

/// Weighted total; fills `grads` (zero-initialized here) when non-null.
template <typename T>
LossReport total_loss(const LossInputs<T>& in, const LossWeights& w, LossGradients<T>* grads = nullptr)
{
    w.validate();
    if (!in.harmonized || !in.ground_truth || !in.fg_mask)
        throw Error("total_loss: missing image inputs");
    if (grads) {
        grads->harmonized = basic_image<T>(in.harmonized->height(), in.harmonized->width(), in.harmonized->channels());
        grads->code_h.assign(in.code_h.size(), T(0));
        grads->code_b.assign(in.code_b.size(), T(0));
        grads->code_c.assign(in.code_c.size(), T(0));
        grads->code_r.assign(in.code_r.size(), T(0));
    }
    basic_image<T>* gimg = grads ? &grads->harmonized : nullptr;
    const T alpha = static_cast<T>(w.alpha);
    const T lambda = static_cast<T>(w.lambda);
    const T beta = static_cast<T>(w.beta);

    LossReport rep;
    rep.harmonization = static_cast<double>(harmonization_loss(*in.harmonized, *in.ground_truth, gimg));
    const auto lm = luminance_matching_loss(*in.harmonized, *in.ground_truth, *in.fg_mask, w, gimg,
                                            {alpha, alpha, alpha});
    rep.highlight = static_cast<double>(lm.highlight);
    rep.mid_tone = static_cast<double>(lm.mid_tone);
    rep.shadow = static_cast<double>(lm.shadow);
    rep.lm = rep.highlight + rep.mid_tone + rep.shadow;
    rep.consistency = static_cast<double>(consistency_loss(in.code_h, in.code_b, grads ? grads->code_h.data() : nullptr,
                                                           grads ? grads->code_b.data() : nullptr, lambda));
    TripletGrads<T> tg{};
    if (grads)
        tg = {grads->code_h.data(), grads->code_b.data(), grads->code_c.data(), grads->code_r.data()};
    const auto [t1, t2] =
        triplet_losses(in.code_h, in.code_b, in.code_c, in.code_r, static_cast<T>(w.margin), tg, {beta, beta});
    rep.triplet1 = static_cast<double>(t1);
    rep.triplet2 = static_cast<double>(t2);
    rep.total = rep.harmonization + w.alpha * rep.lm + w.lambda * rep.consistency + w.beta * (rep.triplet1 + rep.triplet2);
    return rep;
}

} // namespace iharmon
