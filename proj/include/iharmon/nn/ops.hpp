#pragma once

// Differentiable tensor operations used by the harmonizer and the style encoder.

#include <algorithm>
#include <cmath>
#include <vector>

#include <cblas.h>

#include "iharmon/nn/autograd.hpp"

namespace iharmon::nn {

namespace detail {

// C[M x N] (+)= A[M x K] * B[K x N], optionally transposing A or B (row-major).
inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, const float* a, const float* b,
                 float* c, float beta)
{
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
                m, n, k, 1.0f, a, trans_a ? m : k, b, trans_b ? k : n, beta, c, n);
}

struct ConvGeometry {
    int cin, h, w, k, stride, pad, hout, wout;
    int rows() const { return cin * k * k; }
    int cols() const { return hout * wout; }
    bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

// Output columns [lo, hi) whose input column ox * stride - pad + kx lies inside [0, w).
inline void valid_columns(const ConvGeometry& g, int kx, int& lo, int& hi)
{
    const int off = kx - g.pad;
    lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
    hi = g.w - 1 - off < 0 ? 0 : std::min(g.wout, (g.w - 1 - off) / g.stride + 1);
    lo = std::min(lo, hi);
}

inline void im2col(const float* x, const ConvGeometry& g, float* cols)
{
    const int P = g.cols();
    for (int c = 0; c < g.cin; ++c) {
        const float* xc = x + static_cast<std::size_t>(c) * g.h * g.w;
        for (int ky = 0; ky < g.k; ++ky) {
            for (int kx = 0; kx < g.k; ++kx) {
                float* row = cols + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * P;
                int lo, hi;
                valid_columns(g, kx, lo, hi);
                const int off = kx - g.pad;
                for (int oy = 0; oy < g.hout; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    float* dst = row + static_cast<std::size_t>(oy) * g.wout;
                    if (iy < 0 || iy >= g.h) {
                        std::fill_n(dst, g.wout, 0.0f);
                        continue;
                    }
                    const float* src = xc + static_cast<std::size_t>(iy) * g.w + off;
                    std::fill_n(dst, lo, 0.0f);
                    if (g.stride == 1)
                        std::copy(src + lo, src + hi, dst + lo);
                    else
                        for (int ox = lo; ox < hi; ++ox)
                            dst[ox] = src[ox * g.stride];
                    std::fill(dst + hi, dst + g.wout, 0.0f);
                }
            }
        }
    }
}

inline void col2im_add(const float* cols, const ConvGeometry& g, float* dx)
{
    const int P = g.cols();
    for (int c = 0; c < g.cin; ++c) {
        float* xc = dx + static_cast<std::size_t>(c) * g.h * g.w;
        for (int ky = 0; ky < g.k; ++ky) {
            for (int kx = 0; kx < g.k; ++kx) {
                const float* row = cols + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * P;
                int lo, hi;
                valid_columns(g, kx, lo, hi);
                const int off = kx - g.pad;
                for (int oy = 0; oy < g.hout; ++oy) {
                    const int iy = oy * g.stride - g.pad + ky;
                    if (iy < 0 || iy >= g.h)
                        continue;
                    const float* src = row + static_cast<std::size_t>(oy) * g.wout;
                    float* dst = xc + static_cast<std::size_t>(iy) * g.w + off;
                    if (g.stride == 1)
                        for (int ox = lo; ox < hi; ++ox)
                            dst[ox] += src[ox];
                    else
                        for (int ox = lo; ox < hi; ++ox)
                            dst[ox * g.stride] += src[ox];
                }
            }
        }
    }
}

inline void require4(const Tensor& t, const char* op)
{
    if (t.rank() != 4)
        throw ShapeError(std::string(op) + ": expected a 4-D tensor, got " + shape_string(t.shape()));
}

} // namespace detail

/// 2-D convolution. weight is Cout x Cin x k x k; bias may be null.
inline Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad)
{
    const Tensor& X = x->value;
    const Tensor& W = weight->value;
    detail::require4(X, "conv2d");
    if (W.rank() != 4 || W.dim(1) != X.c() || W.dim(2) != W.dim(3))
        throw ShapeError("conv2d: weight " + shape_string(W.shape()) + " incompatible with input " +
                         shape_string(X.shape()));
    const int cout = W.dim(0);
    const int k = W.dim(2);
    detail::ConvGeometry g{X.c(), X.h(), X.w(), k, stride, pad, 0, 0};
    g.hout = (g.h + 2 * pad - k) / stride + 1;
    g.wout = (g.w + 2 * pad - k) / stride + 1;
    if (g.hout < 1 || g.wout < 1)
        throw ShapeError("conv2d: output would be empty");

    Tensor Y({X.n(), cout, g.hout, g.wout});
    std::vector<float> cols(g.pointwise() ? 0 : static_cast<std::size_t>(g.rows()) * g.cols());
    for (int n = 0; n < X.n(); ++n) {
        const float* src = X.channel(n, 0);
        if (!g.pointwise()) {
            detail::im2col(src, g, cols.data());
            src = cols.data();
        }
        float* out = Y.channel(n, 0);
        detail::gemm(false, false, cout, g.cols(), g.rows(), W.data(), src, out, 0.0f);
        if (bias) {
            for (int c = 0; c < cout; ++c) {
                const float b = bias->value[c];
                float* o = out + static_cast<std::size_t>(c) * g.cols();
                for (int i = 0; i < g.cols(); ++i)
                    o[i] += b;
            }
        }
    }

    std::vector<Var> parents{x, weight};
    if (bias)
        parents.push_back(bias);
    return make_node(std::move(Y), parents, [x, weight, bias, g, cout](Node& self) {
        const Tensor& dY = self.grad;
        const Tensor& X = x->value;
        const Tensor& W = weight->value;
        std::vector<float> cols(g.pointwise() ? 0 : static_cast<std::size_t>(g.rows()) * g.cols());
        std::vector<float> dcols(static_cast<std::size_t>(g.rows()) * g.cols());
        for (int n = 0; n < X.n(); ++n) {
            const float* dy = dY.channel(n, 0);
            if (weight->requires_grad) {
                const float* src = X.channel(n, 0);
                if (!g.pointwise()) {
                    detail::im2col(src, g, cols.data());
                    src = cols.data();
                }
                detail::gemm(false, true, cout, g.rows(), g.cols(), dy, src, weight->grad_buffer().data(), 1.0f);
            }
            if (bias && bias->requires_grad) {
                Tensor& db = bias->grad_buffer();
                for (int c = 0; c < cout; ++c) {
                    const float* d = dy + static_cast<std::size_t>(c) * g.cols();
                    float s = 0.0f;
                    for (int i = 0; i < g.cols(); ++i)
                        s += d[i];
                    db[c] += s;
                }
            }
            if (x->requires_grad) {
                float* dx = x->grad_buffer().channel(n, 0);
                if (g.pointwise()) {
                    detail::gemm(true, false, g.rows(), g.cols(), cout, W.data(), dy, dx, 1.0f);
                } else {
                    detail::gemm(true, false, g.rows(), g.cols(), cout, W.data(), dy, dcols.data(), 0.0f);
                    detail::col2im_add(dcols.data(), g, dx);
                }
            }
        }
    });
}

inline Var add(const Var& a, const Var& b)
{
    if (a->value.shape() != b->value.shape())
        throw ShapeError("add: " + shape_string(a->value.shape()) + " vs " + shape_string(b->value.shape()));
    Tensor Y = a->value;
    add_into(Y, b->value);
    return make_node(std::move(Y), {a, b}, [a, b](Node& self) {
        if (a->requires_grad)
            add_into(a->grad_buffer(), self.grad);
        if (b->requires_grad)
            add_into(b->grad_buffer(), self.grad);
    });
}

inline Var leaky_relu(const Var& x, float slope = 0.2f)
{
    Tensor Y = x->value;
    for (auto& v : Y.values())
        v = v > 0.0f ? v : slope * v;
    return make_node(std::move(Y), {x}, [x, slope](Node& self) {
        auto dx = x->grad_buffer().values();
        const auto xv = x->value.values();
        const auto dy = self.grad.values();
        for (std::size_t i = 0; i < dx.size(); ++i)
            dx[i] += xv[i] > 0.0f ? dy[i] : slope * dy[i];
    });
}

inline Var sigmoid(const Var& x)
{
    Tensor Y = x->value;
    for (auto& v : Y.values())
        v = 1.0f / (1.0f + std::exp(-v));
    return make_node(Y, {x}, [x, Y](Node& self) {
        auto dx = x->grad_buffer().values();
        const auto y = Y.values();
        const auto dy = self.grad.values();
        for (std::size_t i = 0; i < dx.size(); ++i)
            dx[i] += dy[i] * y[i] * (1.0f - y[i]);
    });
}

/// log(x / (1 - x)) with x clamped to [eps, 1 - eps]; zero gradient where clamped.
inline Var logit(const Var& x, float eps = 1e-6f)
{
    Tensor Y = x->value;
    for (auto& v : Y.values()) {
        const float c = std::clamp(v, eps, 1.0f - eps);
        v = std::log(c / (1.0f - c));
    }
    return make_node(std::move(Y), {x}, [x, eps](Node& self) {
        auto dx = x->grad_buffer().values();
        const auto xv = x->value.values();
        const auto dy = self.grad.values();
        for (std::size_t i = 0; i < dx.size(); ++i)
            if (xv[i] > eps && xv[i] < 1.0f - eps)
                dx[i] += dy[i] / (xv[i] * (1.0f - xv[i]));
    });
}

/// Elementwise product with a constant N x 1 x H x W map broadcast over channels.
inline Var mul_map(const Var& x, const Tensor& map)
{
    const Tensor& X = x->value;
    detail::require4(X, "mul_map");
    if (map.n() != X.n() || map.c() != 1 || map.h() != X.h() || map.w() != X.w())
        throw ShapeError("mul_map: map " + shape_string(map.shape()) + " vs " + shape_string(X.shape()));
    Tensor Y = X;
    const std::size_t P = X.plane();
    for (int n = 0; n < X.n(); ++n) {
        const float* m = map.channel(n, 0);
        for (int c = 0; c < X.c(); ++c) {
            float* y = Y.channel(n, c);
            for (std::size_t i = 0; i < P; ++i)
                y[i] *= m[i];
        }
    }
    return make_node(std::move(Y), {x}, [x, map](Node& self) {
        Tensor& dX = x->grad_buffer();
        const std::size_t P = dX.plane();
        for (int n = 0; n < dX.n(); ++n) {
            const float* m = map.channel(n, 0);
            for (int c = 0; c < dX.c(); ++c) {
                float* dx = dX.channel(n, c);
                const float* dy = self.grad.channel(n, c);
                for (std::size_t i = 0; i < P; ++i)
                    dx[i] += dy[i] * m[i];
            }
        }
    });
}

/// out = map * a + (1 - map) * b with a constant N x 1 x H x W map.
inline Var blend_map(const Var& a, const Var& b, const Tensor& map)
{
    Tensor inv = map;
    for (auto& v : inv.values())
        v = 1.0f - v;
    return add(mul_map(a, map), mul_map(b, inv));
}

/// Adds bias[c] to channel c, scaled by an optional N x 1 x H x W map.
inline Var add_bias(const Var& x, const Var& bias, const Tensor* map = nullptr)
{
    const Tensor& X = x->value;
    detail::require4(X, "add_bias");
    if (bias->value.numel() != static_cast<std::size_t>(X.c()))
        throw ShapeError("add_bias: bias size does not match channels");
    Tensor Y = X;
    const std::size_t P = X.plane();
    for (int n = 0; n < X.n(); ++n)
        for (int c = 0; c < X.c(); ++c) {
            float* y = Y.channel(n, c);
            const float b = bias->value[c];
            const float* m = map ? map->channel(n, 0) : nullptr;
            for (std::size_t i = 0; i < P; ++i)
                y[i] += m ? b * m[i] : b;
        }
    Tensor mcopy = map ? *map : Tensor();
    return make_node(std::move(Y), {x, bias}, [x, bias, mcopy](Node& self) {
        const Tensor& dY = self.grad;
        if (x->requires_grad)
            add_into(x->grad_buffer(), dY);
        if (bias->requires_grad) {
            Tensor& db = bias->grad_buffer();
            const std::size_t P = dY.plane();
            for (int n = 0; n < dY.n(); ++n)
                for (int c = 0; c < dY.c(); ++c) {
                    const float* dy = dY.channel(n, c);
                    const float* m = mcopy.empty() ? nullptr : mcopy.channel(n, 0);
                    float s = 0.0f;
                    for (std::size_t i = 0; i < P; ++i)
                        s += m ? dy[i] * m[i] : dy[i];
                    db[c] += s;
                }
        }
    });
}

inline Var upsample_nearest2x(const Var& x)
{
    const Tensor& X = x->value;
    detail::require4(X, "upsample_nearest2x");
    const int H = X.h(), W = X.w(), planes = X.n() * X.c();
    Tensor Y({X.n(), X.c(), H * 2, W * 2});
    for (int p = 0; p < planes; ++p) {
        const float* src = X.data() + static_cast<std::size_t>(p) * H * W;
        float* dst = Y.data() + static_cast<std::size_t>(p) * H * W * 4;
        for (int y = 0; y < 2 * H; ++y) {
            const float* s = src + static_cast<std::size_t>(y / 2) * W;
            float* d = dst + static_cast<std::size_t>(y) * 2 * W;
            for (int xx = 0; xx < W; ++xx)
                d[2 * xx] = d[2 * xx + 1] = s[xx];
        }
    }
    return make_node(std::move(Y), {x}, [x, H, W, planes](Node& self) {
        float* dX = x->grad_buffer().data();
        const float* dY = self.grad.data();
        for (int p = 0; p < planes; ++p) {
            float* dst = dX + static_cast<std::size_t>(p) * H * W;
            const float* src = dY + static_cast<std::size_t>(p) * H * W * 4;
            for (int y = 0; y < 2 * H; ++y) {
                float* d = dst + static_cast<std::size_t>(y / 2) * W;
                const float* s = src + static_cast<std::size_t>(y) * 2 * W;
                for (int xx = 0; xx < W; ++xx)
                    d[xx] += s[2 * xx] + s[2 * xx + 1];
            }
        }
    });
}

/// Fully connected layer: x is N x Din, weight Dout x Din, bias Dout.
inline Var linear(const Var& x, const Var& weight, const Var& bias)
{
    const Tensor& X = x->value;
    const Tensor& W = weight->value;
    if (X.rank() != 2 || W.rank() != 2 || W.dim(1) != X.dim(1))
        throw ShapeError("linear: weight " + shape_string(W.shape()) + " vs input " + shape_string(X.shape()));
    const int N = X.dim(0);
    const int din = X.dim(1);
    const int dout = W.dim(0);
    Tensor Y({N, dout});
    detail::gemm(false, true, N, dout, din, X.data(), W.data(), Y.data(), 0.0f);
    for (int n = 0; n < N; ++n)
        for (int j = 0; j < dout; ++j)
            Y[static_cast<std::size_t>(n) * dout + j] += bias->value[j];
    return make_node(std::move(Y), {x, weight, bias}, [x, weight, bias, N, din, dout](Node& self) {
        const Tensor& dY = self.grad;
        if (weight->requires_grad)
            detail::gemm(true, false, dout, din, N, dY.data(), x->value.data(), weight->grad_buffer().data(), 1.0f);
        if (bias->requires_grad) {
            Tensor& db = bias->grad_buffer();
            for (int n = 0; n < N; ++n)
                for (int j = 0; j < dout; ++j)
                    db[j] += dY[static_cast<std::size_t>(n) * dout + j];
        }
        if (x->requires_grad)
            detail::gemm(false, false, N, din, dout, dY.data(), weight->value.data(), x->grad_buffer().data(), 1.0f);
    });
}

/// Adaptive instance normalization: per (n, c) the plane is normalized as
/// (x - mean) / (std + eps) and then scaled by gamma[n, c] and shifted by beta[n, c].
inline Var adain(const Var& x, const Var& gamma, const Var& beta, float eps = 1e-5f)
{
    const Tensor& X = x->value;
    detail::require4(X, "adain");
    const int N = X.n();
    const int C = X.c();
    if (gamma->value.shape() != Shape{N, C} || beta->value.shape() != Shape{N, C})
        throw ShapeError("adain: gamma/beta must be N x C");
    const std::size_t P = X.plane();

    Tensor xhat(X.shape());
    std::vector<float> mean(static_cast<std::size_t>(N) * C);
    std::vector<float> stdv(mean.size());
    Tensor Y(X.shape());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float* xp = X.channel(n, c);
            double s = 0.0;
            for (std::size_t i = 0; i < P; ++i)
                s += xp[i];
            const double mu = s / static_cast<double>(P);
            double v = 0.0;
            for (std::size_t i = 0; i < P; ++i)
                v += (xp[i] - mu) * (xp[i] - mu);
            const double sd = std::sqrt(v / static_cast<double>(P));
            const std::size_t nc = static_cast<std::size_t>(n) * C + c;
            mean[nc] = static_cast<float>(mu);
            stdv[nc] = static_cast<float>(sd);
            const float inv = static_cast<float>(1.0 / (sd + eps));
            const float g = gamma->value[nc];
            const float b = beta->value[nc];
            float* xh = xhat.channel(n, c);
            float* y = Y.channel(n, c);
            for (std::size_t i = 0; i < P; ++i) {
                xh[i] = static_cast<float>((xp[i] - mu) * inv);
                y[i] = g * xh[i] + b;
            }
        }

    return make_node(std::move(Y), {x, gamma, beta}, [x, gamma, beta, xhat, stdv, eps, N, C, P](Node& self) {
        const Tensor& dY = self.grad;
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const std::size_t nc = static_cast<std::size_t>(n) * C + c;
                const float* dy = dY.channel(n, c);
                const float* xh = xhat.channel(n, c);
                double sum_dy = 0.0;
                double sum_dy_xh = 0.0;
                for (std::size_t i = 0; i < P; ++i) {
                    sum_dy += dy[i];
                    sum_dy_xh += static_cast<double>(dy[i]) * xh[i];
                }
                if (gamma->requires_grad)
                    gamma->grad_buffer()[nc] += static_cast<float>(sum_dy_xh);
                if (beta->requires_grad)
                    beta->grad_buffer()[nc] += static_cast<float>(sum_dy);
                if (!x->requires_grad)
                    continue;
                // With s = std + eps and xhat = (x - mean) / s:
                // dx = g/s * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat) * s / std)
                const double g = gamma->value[nc];
                const double sd = stdv[nc];
                const double s = sd + eps;
                const double mean_dxh = g * sum_dy / static_cast<double>(P);
                const double mean_dxh_xh = g * sum_dy_xh / static_cast<double>(P);
                const double corr = sd > 0.0 ? mean_dxh_xh * s / sd : 0.0;
                float* dx = x->grad_buffer().channel(n, c);
                for (std::size_t i = 0; i < P; ++i)
                    dx[i] += static_cast<float>((g * dy[i] - mean_dxh - xh[i] * corr) / s);
            }
    });
}

inline Var concat_channels(const std::vector<Var>& xs)
{
    if (xs.empty())
        throw ShapeError("concat_channels: no inputs");
    const Tensor& first = xs.front()->value;
    detail::require4(first, "concat_channels");
    int C = 0;
    for (const auto& v : xs) {
        const Tensor& t = v->value;
        detail::require4(t, "concat_channels");
        if (t.n() != first.n() || t.h() != first.h() || t.w() != first.w())
            throw ShapeError("concat_channels: spatial mismatch");
        C += t.c();
    }
    Tensor Y({first.n(), C, first.h(), first.w()});
    const std::size_t P = first.plane();
    for (int n = 0; n < first.n(); ++n) {
        int off = 0;
        for (const auto& v : xs) {
            const Tensor& t = v->value;
            std::copy_n(t.channel(n, 0), t.c() * P, Y.channel(n, off));
            off += t.c();
        }
    }
    return make_node(std::move(Y), xs, [xs](Node& self) {
        const Tensor& dY = self.grad;
        const std::size_t P = dY.plane();
        for (int n = 0; n < dY.n(); ++n) {
            int off = 0;
            for (const auto& v : xs) {
                const int c = v->value.c();
                if (v->requires_grad) {
                    float* dx = v->grad_buffer().channel(n, 0);
                    const float* dy = dY.channel(n, off);
                    for (std::size_t i = 0; i < c * P; ++i)
                        dx[i] += dy[i];
                }
                off += c;
            }
        }
    });
}

/// Repeats an N x C vector over an H x W grid.
inline Var broadcast_spatial(const Var& v, int h, int w)
{
    const Tensor& V = v->value;
    if (V.rank() != 2)
        throw ShapeError("broadcast_spatial: expected N x C");
    const int N = V.dim(0);
    const int C = V.dim(1);
    Tensor Y({N, C, h, w});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            std::fill_n(Y.channel(n, c), Y.plane(), V[static_cast<std::size_t>(n) * C + c]);
    return make_node(std::move(Y), {v}, [v, N, C](Node& self) {
        Tensor& dV = v->grad_buffer();
        const std::size_t P = self.grad.plane();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const float* dy = self.grad.channel(n, c);
                float s = 0.0f;
                for (std::size_t i = 0; i < P; ++i)
                    s += dy[i];
                dV[static_cast<std::size_t>(n) * C + c] += s;
            }
    });
}

/// Mean of each channel over the positions where the constant map is positive,
/// weighted by the map. Result is N x C; an all-zero map yields zeros.
inline Var masked_average_pool(const Var& x, const Tensor& map)
{
    const Tensor& X = x->value;
    detail::require4(X, "masked_average_pool");
    const int N = X.n();
    const int C = X.c();
    const std::size_t P = X.plane();
    std::vector<float> norm(static_cast<std::size_t>(N));
    for (int n = 0; n < N; ++n) {
        const float* m = map.channel(n, 0);
        double s = 0.0;
        for (std::size_t i = 0; i < P; ++i)
            s += m[i];
        norm[n] = s > 0.0 ? static_cast<float>(1.0 / s) : 0.0f;
    }
    Tensor Y({N, C});
    for (int n = 0; n < N; ++n) {
        const float* m = map.channel(n, 0);
        for (int c = 0; c < C; ++c) {
            const float* xp = X.channel(n, c);
            double s = 0.0;
            for (std::size_t i = 0; i < P; ++i)
                s += static_cast<double>(xp[i]) * m[i];
            Y[static_cast<std::size_t>(n) * C + c] = static_cast<float>(s * norm[n]);
        }
    }
    return make_node(std::move(Y), {x}, [x, map, norm, N, C, P](Node& self) {
        Tensor& dX = x->grad_buffer();
        for (int n = 0; n < N; ++n) {
            const float* m = map.channel(n, 0);
            for (int c = 0; c < C; ++c) {
                const float g = self.grad[static_cast<std::size_t>(n) * C + c] * norm[n];
                float* dx = dX.channel(n, c);
                for (std::size_t i = 0; i < P; ++i)
                    dx[i] += g * m[i];
            }
        }
    });
}

/// Partial-convolution result: features and the propagated validity mask.
struct PartialConvOutput {
    Var features;
    Tensor mask;
};

/// Convolution over valid (mask > 0) inputs only, renormalized by
/// window_size / sum(mask window). Positions whose window holds no valid input
/// produce 0 and are marked invalid in the returned mask. mask is N x 1 x H x W.
inline PartialConvOutput partial_conv2d(const Var& x, const Tensor& mask, const Var& weight, const Var& bias,
                                        int stride, int pad)
{
    const Tensor& X = x->value;
    detail::require4(X, "partial_conv2d");
    if (mask.rank() != 4 || mask.n() != X.n() || mask.c() != 1 || mask.h() != X.h() || mask.w() != X.w())
        throw ShapeError("partial_conv2d: mask " + shape_string(mask.shape()) + " vs " + shape_string(X.shape()));
    const int k = weight->value.dim(2);

    // Window sums of the mask via the same convolution geometry with a ones kernel.
    auto mask_sum = conv2d(constant(mask), constant(Tensor({1, 1, k, k}, 1.0f)), nullptr, stride, pad)->value;
    Tensor ratio = mask_sum;
    Tensor updated = mask_sum;
    const float window = static_cast<float>(k * k);
    for (std::size_t i = 0; i < ratio.numel(); ++i) {
        const bool valid = mask_sum[i] > 0.0f;
        ratio[i] = valid ? window / mask_sum[i] : 0.0f;
        updated[i] = valid ? 1.0f : 0.0f;
    }

    auto y = conv2d(mul_map(x, mask), weight, nullptr, stride, pad);
    y = mul_map(y, ratio);
    if (bias)
        y = add_bias(y, bias, &updated);
    return {y, updated};
}

} // namespace iharmon::nn
