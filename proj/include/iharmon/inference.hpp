#pragma once

// Harmonization at any resolution: the network runs at model resolution, a polynomial
// colour mapping is fit from the low-resolution foreground to the network output and
// replayed on the full-resolution foreground.

#include <algorithm>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>

#include "iharmon/archive.hpp"
#include "iharmon/color_transform.hpp"
#include "iharmon/error.hpp"
#include "iharmon/imaging.hpp"
#include "iharmon/model.hpp"

namespace iharmon {

inline constexpr std::size_t kMinReferencePixels = 16;
inline constexpr double kMaxGuideOverlap = 0.05;

/// A request that cannot be served as given (bad masks, shapes, ratios).
class RequestError : public Error {
public:
    using Error::Error;
};

struct HarmonizeOptions {
    bool return_lowres = false;
    int poly_degree = 3;
};

struct HarmonizeRequest {
    Image composite;
    Mask fg_mask;
    std::optional<Mask> guide_mask;
    HarmonizeOptions options;
};

struct BlendRatios {
    double r1 = 1.0;
    double r2 = 1.0;

    void validate() const
    {
        if (!(r1 >= 0.0 && r1 <= 1.0) || !(r2 >= 0.0 && r2 <= 1.0))
            throw RequestError("blend ratios must lie in [0, 1]");
    }
};

struct HarmonizeResult {
    Image output;                ///< input resolution
    std::optional<Image> lowres; ///< network output, filled when return_lowres is set
    ColorTransform transform;
    bool used_default_reference = false;
};

/// Automatic reference: the whole background.
inline Mask default_reference(const Image& composite, const Mask& fg_mask)
{
    if (!fg_mask.aligned_with(composite))
        throw RequestError("foreground mask is not aligned with the composite");
    return invert(binarize(fg_mask));
}

inline void validate_request(const HarmonizeRequest& req)
{
    if (req.composite.empty() || req.composite.channels() != 3)
        throw RequestError("composite must be a non-empty RGB image");
    if (!is_valid_image(req.composite))
        throw RequestError("composite values must be finite and within [0, 1]");
    if (!req.fg_mask.aligned_with(req.composite))
        throw RequestError("foreground mask is not aligned with the composite");
    const auto fg = binarize(req.fg_mask);
    const auto n_fg = fg.count_selected();
    if (n_fg == 0)
        throw RequestError("foreground mask is empty");
    if (!req.guide_mask)
        return;
    if (!req.guide_mask->aligned_with(req.composite))
        throw RequestError("guide mask is not aligned with the composite");
    const auto guide = binarize(*req.guide_mask);
    if (guide.count_selected() == 0)
        throw RequestError("guide mask is empty");
    std::size_t overlap = 0;
    for (std::size_t i = 0; i < fg.size(); ++i)
        overlap += fg.selected(i) && guide.selected(i);
    if (static_cast<double>(overlap) >= kMaxGuideOverlap * static_cast<double>(n_fg))
        throw RequestError("guide mask overlaps the foreground by 5% or more");
}

namespace detail {

// Pixels the colour mapping touches: anything the soft mask blends in.
inline Mask support(const Mask& m)
{
    Mask out(m.height(), m.width());
    for (std::size_t i = 0; i < m.size(); ++i)
        out[i] = m[i] > 0.0f ? 1.0f : 0.0f;
    return out;
}

} // namespace detail

/// Stateless pipeline over one immutable model; safe to share between threads.
class Harmonizer {
public:
    explicit Harmonizer(HarmonizationModel model) : model_(std::move(model)) {}
    explicit Harmonizer(const WeightArchive& a) : model_(model_from_archive(a)) {}

    const HarmonizationModel& model() const noexcept { return model_; }
    int resolution() const noexcept { return model_.config().resolution; }

    /// Style code of the request's reference region, at model resolution.
    StyleCode reference_code(const HarmonizeRequest& req) const
    {
        validate_request(req);
        return encode(req.composite, reference_of(req));
    }

    HarmonizeResult run(const HarmonizeRequest& req) const
    {
        const auto code = reference_code(req);
        return run_with_code(req, code);
    }

    /// The pipeline with an externally supplied style code in place of the reference code.
    HarmonizeResult run_with_code(const HarmonizeRequest& req, const StyleCode& code) const
    {
        validate_request(req);
        if (code.dim() != static_cast<std::size_t>(model_.config().style_dim))
            throw RequestError("style code dimension does not match the model");
        const int r = resolution();
        const auto fg = binarize(req.fg_mask);
        const auto low = resize(req.composite, r, r);
        const auto fg_low = resize_mask(fg, r, r);
        if (fg_low.count_selected() == 0)
            throw RequestError("foreground vanishes at model resolution");

        const auto out_low = model_.harmonize_forward(multiply_mask(low, fg_low), fg_low, code);

        int degree = req.options.poly_degree;
        while (degree > 1 && fg_low.count_selected() < polynomial_term_count(degree))
            --degree;
        HarmonizeResult res;
        res.transform = fit_color_transform(low, out_low, fg_low, degree);
        const auto touched = detail::support(req.fg_mask);
        const auto mapped = apply_color_transform(req.composite, res.transform, touched);
        res.output = alpha_composite(mapped, req.composite, req.fg_mask);
        res.used_default_reference = !req.guide_mask.has_value();
        if (req.options.return_lowres)
            res.lowres = out_low;
        return res;
    }

    /// Runs the same request under two guide masks.
    std::pair<HarmonizeResult, HarmonizeResult> run_with_regions(HarmonizeRequest req, const Mask& guide_a,
                                                                const Mask& guide_b) const
    {
        req.guide_mask = guide_a;
        auto a = run(req);
        req.guide_mask = guide_b;
        auto b = run(req);
        return {std::move(a), std::move(b)};
    }

private:
    Mask reference_of(const HarmonizeRequest& req) const
    {
        return req.guide_mask ? binarize(*req.guide_mask) : default_reference(req.composite, req.fg_mask);
    }

    StyleCode encode(const Image& composite, const Mask& reference) const
    {
        const int r = resolution();
        const auto ref_low = resize_mask(reference, r, r);
        if (ref_low.count_selected() < kMinReferencePixels)
            throw RequestError("reference too small");
        return model_.style_encode(resize(composite, r, r), ref_low);
    }

    HarmonizationModel model_;
};

/// gamma = r1 * phi + (1 - r2) * psi
inline StyleCode blend_codes(const StyleCode& phi, const StyleCode& psi, const BlendRatios& r)
{
    r.validate();
    if (phi.dim() != psi.dim())
        throw RequestError("style codes have different dimensions");
    StyleCode g;
    g.values.resize(phi.dim());
    const auto a = static_cast<float>(r.r1);
    const auto b = static_cast<float>(1.0 - r.r2);
    for (std::size_t i = 0; i < g.values.size(); ++i)
        g.values[i] = a * phi.values[i] + b * psi.values[i];
    return g;
}

/// Harmonization conditioned on a blend of the harmonization code and a second encoder's code.
inline HarmonizeResult color_transfer(const HarmonizeRequest& req, const BlendRatios& r, const Harmonizer& harmonize,
                                      const Harmonizer& color)
{
    r.validate();
    if (harmonize.model().config().style_dim != color.model().config().style_dim)
        throw RequestError("harmonization and colour encoders have different code sizes");
    const auto phi = harmonize.reference_code(req);
    const auto psi = color.reference_code(req);
    return harmonize.run_with_code(req, blend_codes(phi, psi, r));
}

} // namespace iharmon
