#pragma once

// Polynomial RGB -> RGB mapping fit by least squares on a low-resolution pair and
// replayed on the full-resolution image.

#include <algorithm>
#include <array>
#include <vector>

#include <Eigen/Dense>

#include "iharmon/error.hpp"
#include "iharmon/imaging.hpp"

namespace iharmon {

struct ColorTransform {
    int degree = 1;
    /// coefficients[channel][term], terms ordered as polynomial_terms(degree).
    std::array<std::vector<double>, 3> coefficients;
    /// The least-squares system was rank deficient; the solution nearest the identity was used.
    bool degenerate = false;
};

/// Singular directions below this fraction of the largest are treated as absent.
inline constexpr double kFitRankThreshold = 1e-4;

/// Exponents (r, g, b) of every monomial with total degree <= degree, bias first.
inline std::vector<std::array<int, 3>> polynomial_terms(int degree)
{
    if (degree < 1)
        throw Error("polynomial degree must be >= 1");
    std::vector<std::array<int, 3>> terms;
    for (int d = 0; d <= degree; ++d)
        for (int i = d; i >= 0; --i)
            for (int j = d - i; j >= 0; --j)
                terms.push_back({i, j, d - i - j});
    return terms;
}

inline std::size_t polynomial_term_count(int degree)
{
    return static_cast<std::size_t>((degree + 1) * (degree + 2) * (degree + 3) / 6);
}

inline ColorTransform identity_color_transform(int degree = 1)
{
    const auto terms = polynomial_terms(degree);
    ColorTransform t;
    t.degree = degree;
    for (int c = 0; c < 3; ++c) {
        t.coefficients[c].assign(terms.size(), 0.0);
        for (std::size_t k = 0; k < terms.size(); ++k) {
            const auto& e = terms[k];
            if (e[0] + e[1] + e[2] == 1 && e[c] == 1)
                t.coefficients[c][k] = 1.0;
        }
    }
    return t;
}

namespace detail {

inline void eval_basis(const std::vector<std::array<int, 3>>& terms, double r, double g, double b,
                       double* out)
{
    std::array<std::array<double, 8>, 3> pw{};
    const std::array<double, 3> rgb{r, g, b};
    int max_deg = 0;
    for (const auto& e : terms)
        max_deg = std::max({max_deg, e[0], e[1], e[2]});
    for (int c = 0; c < 3; ++c) {
        pw[c][0] = 1.0;
        for (int k = 1; k <= max_deg && k < 8; ++k)
            pw[c][k] = pw[c][k - 1] * rgb[c];
    }
    for (std::size_t k = 0; k < terms.size(); ++k)
        out[k] = pw[0][terms[k][0]] * pw[1][terms[k][1]] * pw[2][terms[k][2]];
}

} // namespace detail

/// Per-channel least-squares fit of dst against the polynomial basis of src,
/// restricted to region pixels. The correction dst - src is solved for with minimum norm,
/// so directions the region does not constrain stay at the identity.
template <typename T>
ColorTransform fit_color_transform(const basic_image<T>& src, const basic_image<T>& dst,
                                   const basic_mask<T>& region, int degree = 3,
                                   double rank_threshold = kFitRankThreshold)
{
    if (degree < 1 || degree > 7)
        throw Error("polynomial degree must lie in [1, 7]");
    if (!src.same_shape(dst) || src.channels() != 3 || !region.aligned_with(src))
        throw ShapeError("fit_color_transform: inputs are not aligned RGB images");

    const auto terms = polynomial_terms(degree);
    const auto n_terms = static_cast<Eigen::Index>(terms.size());
    const auto n = static_cast<Eigen::Index>(region.count_selected());
    if (n < n_terms)
        throw Error("fit_color_transform: region has fewer pixels than basis terms");

    Eigen::MatrixXd basis(n, n_terms);
    Eigen::MatrixXd target(n, 3);
    std::vector<double> row(terms.size());
    Eigen::Index r = 0;
    const auto s = src.values();
    const auto d = dst.values();
    for (std::size_t i = 0; i < region.size(); ++i) {
        if (!region.selected(i))
            continue;
        detail::eval_basis(terms, s[3 * i], s[3 * i + 1], s[3 * i + 2], row.data());
        for (Eigen::Index k = 0; k < n_terms; ++k)
            basis(r, k) = row[k];
        for (int c = 0; c < 3; ++c)
            target(r, c) = static_cast<double>(d[3 * i + c]) - static_cast<double>(s[3 * i + c]);
        ++r;
    }

    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod;
    cod.setThreshold(rank_threshold);
    cod.compute(basis);
    const Eigen::MatrixXd coef = cod.solve(target);

    ColorTransform t = identity_color_transform(degree);
    t.degenerate = cod.rank() < n_terms;
    for (int c = 0; c < 3; ++c)
        for (Eigen::Index k = 0; k < n_terms; ++k)
            t.coefficients[c][k] += coef(k, c);
    return t;
}

/// Maps region pixels through the transform (clamped to [0,1]); others are copied.
template <typename T>
basic_image<T> apply_color_transform(const basic_image<T>& img, const ColorTransform& t,
                                     const basic_mask<T>& region)
{
    if (img.channels() != 3 || !region.aligned_with(img))
        throw ShapeError("apply_color_transform: expected an aligned RGB image");
    const auto terms = polynomial_terms(t.degree);
    for (const auto& c : t.coefficients)
        if (c.size() != terms.size())
            throw Error("apply_color_transform: coefficient count does not match degree");

    basic_image<T> out = img;
    std::vector<double> row(terms.size());
    auto o = out.values();
    for (std::size_t i = 0; i < region.size(); ++i) {
        if (!region.selected(i))
            continue;
        detail::eval_basis(terms, o[3 * i], o[3 * i + 1], o[3 * i + 2], row.data());
        for (int c = 0; c < 3; ++c) {
            double v = 0.0;
            for (std::size_t k = 0; k < row.size(); ++k)
                v += t.coefficients[c][k] * row[k];
            o[3 * i + c] = static_cast<T>(std::clamp(v, 0.0, 1.0));
        }
    }
    return out;
}

} // namespace iharmon
