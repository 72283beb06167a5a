#pragma once

// Harmonizer (encoder-decoder with AdaIN-conditioned decoder) and the
// partial-convolution style encoder.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "iharmon/error.hpp"
#include "iharmon/imaging.hpp"
#include "iharmon/nn/ops.hpp"

namespace iharmon {

/// Appearance summary of a masked region: a 1 x D vector.
struct StyleCode {
    std::vector<float> values;

    std::size_t dim() const noexcept { return values.size(); }
    friend bool operator==(const StyleCode&, const StyleCode&) = default;
};

/// Encoder and decoder depth. Four stride-2 blocks give a bottleneck of input / 16.
inline constexpr int kNetworkDepth = 4;

struct ModelConfig {
    int style_dim = 256;
    int base_channels = 32;
    int residual_blocks = 2;
    int resolution = 256;
    int depth = kNetworkDepth;
    int style_base_channels = 32;
    std::uint64_t init_seed = 0;

    void validate() const
    {
        if (depth != kNetworkDepth)
            throw Error("model depth is fixed at 4 blocks");
        if (resolution < 16 || resolution % 16 != 0)
            throw Error("model resolution must be a positive multiple of 16");
        if (style_dim < 1 || base_channels < 1 || residual_blocks < 0 || style_base_channels < 1)
            throw Error("invalid model configuration");
    }

    /// Channel count after encoder block i (0-based).
    int encoder_channels(int i) const { return base_channels << (i + 1); }
    /// Channel count after decoder block i (0-based).
    int decoder_channels(int i) const { return base_channels << (depth - 1 - i); }

    /// Stable fingerprint of everything that determines the parameter set.
    std::string hash() const
    {
        const std::string canon = "style_dim=" + std::to_string(style_dim) + ";base_channels=" +
                                  std::to_string(base_channels) + ";residual_blocks=" +
                                  std::to_string(residual_blocks) + ";resolution=" + std::to_string(resolution) +
                                  ";depth=" + std::to_string(depth) +
                                  ";style_base_channels=" + std::to_string(style_base_channels);
        std::uint64_t h = 1469598103934665603ULL;
        for (unsigned char c : canon) {
            h ^= c;
            h *= 1099511628211ULL;
        }
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
        return buf;
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c)
{
    j = nlohmann::json{{"style_dim", c.style_dim},
                       {"base_channels", c.base_channels},
                       {"residual_blocks", c.residual_blocks},
                       {"resolution", c.resolution},
                       {"depth", c.depth},
                       {"style_base_channels", c.style_base_channels},
                       {"init_seed", c.init_seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c)
{
    const ModelConfig d;
    c.style_dim = j.value("style_dim", d.style_dim);
    c.base_channels = j.value("base_channels", d.base_channels);
    c.residual_blocks = j.value("residual_blocks", d.residual_blocks);
    c.resolution = j.value("resolution", d.resolution);
    c.depth = j.value("depth", d.depth);
    c.style_base_channels = j.value("style_base_channels", d.style_base_channels);
    c.init_seed = j.value("init_seed", d.init_seed);
}

/// Ordered, named set of trainable tensors.
class ParameterStore {
public:
    nn::Var add(const std::string& name, nn::Tensor value)
    {
        if (index_.count(name))
            throw Error("duplicate parameter " + name);
        auto v = nn::leaf(std::move(value));
        index_[name] = entries_.size();
        entries_.emplace_back(name, v);
        return v;
    }

    const nn::Var& get(const std::string& name) const
    {
        auto it = index_.find(name);
        if (it == index_.end())
            throw Error("unknown parameter " + name);
        return entries_[it->second].second;
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    const std::vector<std::pair<std::string, nn::Var>>& entries() const noexcept { return entries_; }
    std::size_t size() const noexcept { return entries_.size(); }

    std::size_t scalar_count() const
    {
        std::size_t n = 0;
        for (const auto& [name, v] : entries_)
            n += v->value.numel();
        return n;
    }

    void zero_grad()
    {
        for (auto& [name, v] : entries_)
            v->zero_grad();
    }

private:
    std::vector<std::pair<std::string, nn::Var>> entries_;
    std::map<std::string, std::size_t> index_;
};

/// Both networks plus their parameters.
class HarmonizationModel {
public:
    explicit HarmonizationModel(ModelConfig cfg) : cfg_(cfg)
    {
        cfg_.validate();
        std::mt19937_64 rng(cfg_.init_seed);
        build_style_encoder(rng);
        build_harmonizer(rng);
    }

    const ModelConfig& config() const noexcept { return cfg_; }
    ParameterStore& parameters() noexcept { return params_; }
    const ParameterStore& parameters() const noexcept { return params_; }

    /// Zeroes the output head so that the harmonizer reproduces its input.
    void make_identity()
    {
        params_.get("harmonizer.head.out.weight")->value.fill(0.0f);
        params_.get("harmonizer.head.out.bias")->value.fill(0.0f);
    }

    // -- batched, differentiable entry points -----------------------------

    /// Style codes (N x D) of images (N x 3 x H x W) restricted to region maps (N x 1 x H x W).
    nn::Var encode_style(const nn::Var& images, const nn::Tensor& region) const
    {
        nn::Var x = images;
        nn::Tensor mask = region;
        const int layers = style_layer_count();
        for (int i = 0; i < layers; ++i) {
            const std::string p = "style_encoder.layer" + std::to_string(i);
            const bool last = i + 1 == layers;
            auto out = nn::partial_conv2d(x, mask, params_.get(p + ".weight"), params_.get(p + ".bias"),
                                          last ? 1 : 2, last ? 0 : 1);
            x = last ? out.features : nn::leaky_relu(out.features);
            mask = std::move(out.mask);
        }
        return nn::masked_average_pool(x, mask);
    }

    struct ForwardTrace {
        nn::Var output;     ///< N x 3 x H x W, values in (0, 1)
        nn::Var bottleneck; ///< encoder output
    };

    /// Harmonized foreground from the background-zeroed foreground (N x 3 x H x W),
    /// the foreground mask (N x 1 x H x W) and style codes (N x D).
    ForwardTrace harmonize(const nn::Var& masked_fg, const nn::Tensor& fg_mask, const nn::Var& style) const
    {
        const nn::Tensor& in = masked_fg->value;
        if (in.rank() != 4 || in.c() != 3)
            throw ShapeError("harmonize: expected N x 3 x H x W input");
        if (in.h() % 16 != 0 || in.w() % 16 != 0)
            throw ShapeError("harmonize: spatial size must be divisible by 16");
        if (style->value.rank() != 2 || style->value.dim(1) != cfg_.style_dim)
            throw ShapeError("harmonize: style code dimension mismatch");

        auto style_rgb = nn::linear(style, params_.get("harmonizer.style_proj.weight"),
                                    params_.get("harmonizer.style_proj.bias"));
        auto x = nn::concat_channels(
            {masked_fg, nn::constant(fg_mask), nn::broadcast_spatial(style_rgb, in.h(), in.w())});

        for (int i = 0; i < cfg_.depth; ++i) {
            const std::string p = "harmonizer.encoder.block" + std::to_string(i);
            x = nn::leaky_relu(conv(p + ".down", x, 2, 1));
            x = residual_stack(p, x);
        }
        ForwardTrace trace;
        trace.bottleneck = x;

        for (int i = 0; i < cfg_.depth; ++i) {
            const std::string p = "harmonizer.decoder.block" + std::to_string(i);
            x = nn::upsample_nearest2x(x);
            x = conv(p + ".conv", x, 1, 1);
            auto affine = nn::linear(style, params_.get(p + ".adain.weight"), params_.get(p + ".adain.bias"));
            const int C = x->value.c();
            x = nn::adain(x, slice_columns(affine, 0, C), slice_columns(affine, C, C));
            x = nn::leaky_relu(x);
            x = residual_stack(p, x);
        }

        auto h = nn::concat_channels({x, masked_fg});
        h = nn::leaky_relu(conv("harmonizer.head.mix", h, 1, 1));
        auto delta = conv("harmonizer.head.out", h, 1, 0);
        trace.output = nn::sigmoid(nn::add(nn::logit(masked_fg), delta));
        return trace;
    }

    // -- single-image convenience -----------------------------------------

    StyleCode style_encode(const Image& reference, const Mask& region) const
    {
        if (!region.aligned_with(reference) || reference.channels() != 3)
            throw ShapeError("style_encode: reference and region are not aligned");
        if (region.count_selected() == 0)
            throw EmptyRegionError("empty reference region");
        nn::NoGradGuard no_grad;
        auto code = encode_style(nn::constant(image_tensor(reference)), mask_tensor(region));
        return StyleCode{code->value.storage()};
    }

    /// Runs the harmonizer on a single model-resolution foreground.
    Image harmonize_forward(const Image& masked_fg, const Mask& fg_mask, const StyleCode& style) const
    {
        if (!fg_mask.aligned_with(masked_fg) || masked_fg.channels() != 3)
            throw ShapeError("harmonize_forward: input and mask are not aligned");
        if (style.dim() != static_cast<std::size_t>(cfg_.style_dim))
            throw ShapeError("harmonize_forward: style code dimension mismatch");
        nn::NoGradGuard no_grad;
        auto trace = harmonize(nn::constant(image_tensor(masked_fg)), mask_tensor(fg_mask),
                               nn::constant(nn::Tensor({1, cfg_.style_dim}, style.values)));
        return tensor_image(trace.output->value, 0);
    }

    // -- conversions ------------------------------------------------------

    static nn::Tensor image_tensor(const Image& img)
    {
        nn::Tensor t({1, img.channels(), img.height(), img.width()});
        store_image(t, 0, img);
        return t;
    }

    static void store_image(nn::Tensor& t, int n, const Image& img)
    {
        const std::size_t P = img.pixel_count();
        const int C = img.channels();
        const auto v = img.values();
        for (int c = 0; c < C; ++c) {
            float* dst = t.channel(n, c);
            for (std::size_t i = 0; i < P; ++i)
                dst[i] = v[i * C + c];
        }
    }

    static nn::Tensor mask_tensor(const Mask& m)
    {
        nn::Tensor t({1, 1, m.height(), m.width()});
        std::copy(m.values().begin(), m.values().end(), t.data());
        return t;
    }

    static Image tensor_image(const nn::Tensor& t, int n)
    {
        Image img(t.h(), t.w(), t.c());
        const std::size_t P = t.plane();
        auto v = img.values();
        for (int c = 0; c < t.c(); ++c) {
            const float* src = t.channel(n, c);
            for (std::size_t i = 0; i < P; ++i)
                v[i * t.c() + c] = std::clamp(src[i], 0.0f, 1.0f);
        }
        return img;
    }

    int style_layer_count() const { return kNetworkDepth + 1; }

private:
    nn::Var conv(const std::string& name, const nn::Var& x, int stride, int pad) const
    {
        return nn::conv2d(x, params_.get(name + ".weight"), params_.get(name + ".bias"), stride, pad);
    }

    nn::Var residual_stack(const std::string& prefix, nn::Var x) const
    {
        for (int r = 0; r < cfg_.residual_blocks; ++r) {
            const std::string p = prefix + ".res" + std::to_string(r);
            auto h = nn::leaky_relu(conv(p + ".conv1", x, 1, 1));
            x = nn::add(x, conv(p + ".conv2", h, 1, 1));
        }
        return x;
    }

    // Columns [start, start + count) of an N x K matrix.
    static nn::Var slice_columns(const nn::Var& m, int start, int count)
    {
        const nn::Tensor& M = m->value;
        const int N = M.dim(0);
        const int K = M.dim(1);
        nn::Tensor out({N, count});
        for (int n = 0; n < N; ++n)
            for (int j = 0; j < count; ++j)
                out[static_cast<std::size_t>(n) * count + j] = M[static_cast<std::size_t>(n) * K + start + j];
        return nn::make_node(std::move(out), {m}, [m, start, count, N, K](nn::Node& self) {
            nn::Tensor& dm = m->grad_buffer();
            for (int n = 0; n < N; ++n)
                for (int j = 0; j < count; ++j)
                    dm[static_cast<std::size_t>(n) * K + start + j] += self.grad[static_cast<std::size_t>(n) * count + j];
        });
    }

    void add_conv(std::mt19937_64& rng, const std::string& name, int cout, int cin, int k, float gain = 1.0f,
                  bool bias = true)
    {
        const float std_dev = gain * std::sqrt(2.0f / static_cast<float>(cin * k * k));
        nn::Tensor w({cout, cin, k, k});
        std::normal_distribution<float> dist(0.0f, std_dev);
        for (auto& v : w.values())
            v = dist(rng);
        params_.add(name + ".weight", std::move(w));
        if (bias)
            params_.add(name + ".bias", nn::Tensor({cout}));
    }

    void add_linear(std::mt19937_64& rng, const std::string& name, int dout, int din, float gain,
                    float bias_fill = 0.0f, int bias_fill_count = 0)
    {
        nn::Tensor w({dout, din});
        std::normal_distribution<float> dist(0.0f, gain / std::sqrt(static_cast<float>(din)));
        for (auto& v : w.values())
            v = dist(rng);
        nn::Tensor b({dout});
        for (int i = 0; i < bias_fill_count; ++i)
            b[i] = bias_fill;
        params_.add(name + ".weight", std::move(w));
        params_.add(name + ".bias", std::move(b));
    }

    void add_residual_stack(std::mt19937_64& rng, const std::string& prefix, int ch)
    {
        for (int r = 0; r < cfg_.residual_blocks; ++r) {
            const std::string p = prefix + ".res" + std::to_string(r);
            add_conv(rng, p + ".conv1", ch, ch, 3);
            add_conv(rng, p + ".conv2", ch, ch, 3, 0.1f);
        }
    }

    void build_style_encoder(std::mt19937_64& rng)
    {
        int cin = 3;
        const int layers = style_layer_count();
        for (int i = 0; i + 1 < layers; ++i) {
            const int cout = cfg_.style_base_channels << i;
            add_conv(rng, "style_encoder.layer" + std::to_string(i), cout, cin, 3);
            cin = cout;
        }
        add_conv(rng, "style_encoder.layer" + std::to_string(layers - 1), cfg_.style_dim, cin, 1, 0.5f);
    }

    void build_harmonizer(std::mt19937_64& rng)
    {
        const int D = cfg_.style_dim;
        add_linear(rng, "harmonizer.style_proj", 3, D, 0.5f);
        int cin = 7;
        for (int i = 0; i < cfg_.depth; ++i) {
            const std::string p = "harmonizer.encoder.block" + std::to_string(i);
            const int ch = cfg_.encoder_channels(i);
            add_conv(rng, p + ".down", ch, cin, 3);
            add_residual_stack(rng, p, ch);
            cin = ch;
        }
        for (int i = 0; i < cfg_.depth; ++i) {
            const std::string p = "harmonizer.decoder.block" + std::to_string(i);
            const int ch = cfg_.decoder_channels(i);
            add_conv(rng, p + ".conv", ch, cin, 3);
            // Rows [0, ch) produce gamma (bias starts at 1), rows [ch, 2ch) beta.
            add_linear(rng, p + ".adain", 2 * ch, D, 0.1f, 1.0f, ch);
            add_residual_stack(rng, p, ch);
            cin = ch;
        }
        add_conv(rng, "harmonizer.head.mix", cfg_.base_channels, cin + 3, 3);
        add_conv(rng, "harmonizer.head.out", 3, cfg_.base_channels, 1, 0.1f);
    }

    ModelConfig cfg_;
    ParameterStore params_;
};

} // namespace iharmon
