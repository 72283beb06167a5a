#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "iharmon/error.hpp"

namespace iharmon::nn {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s)
{
    return std::accumulate(s.begin(), s.end(), std::size_t{1},
                           [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

inline std::string shape_string(const Shape& s)
{
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i)
            out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

/// Dense float32 tensor; 4-D tensors are N x C x H x W.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, float fill = 0.0f)
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill)
    {
    }
    Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data))
    {
        if (data_.size() != shape_numel(shape_))
            throw ShapeError("tensor data does not match shape " + shape_string(shape_));
    }

    const Shape& shape() const noexcept { return shape_; }
    int dim(std::size_t i) const { return shape_.at(i); }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t numel() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    int n() const { return shape_.at(0); }
    int c() const { return shape_.at(1); }
    int h() const { return shape_.at(2); }
    int w() const { return shape_.at(3); }
    std::size_t plane() const { return static_cast<std::size_t>(h()) * w(); }

    float* data() noexcept { return data_.data(); }
    const float* data() const noexcept { return data_.data(); }
    std::span<float> values() noexcept { return data_; }
    std::span<const float> values() const noexcept { return data_; }
    std::vector<float>& storage() noexcept { return data_; }
    const std::vector<float>& storage() const noexcept { return data_; }

    float& operator[](std::size_t i) { return data_[i]; }
    float operator[](std::size_t i) const { return data_[i]; }

    float& at(int n, int c, int y, int x)
    {
        return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }
    float at(int n, int c, int y, int x) const
    {
        return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
    }

    /// Pointer to the (n, c) spatial plane of a 4-D tensor.
    float* channel(int n, int c) { return data_.data() + (static_cast<std::size_t>(n) * shape_[1] + c) * plane(); }
    const float* channel(int n, int c) const
    {
        return data_.data() + (static_cast<std::size_t>(n) * shape_[1] + c) * plane();
    }

    void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_;
    std::vector<float> data_;
};

inline void add_into(Tensor& dst, const Tensor& src)
{
    if (dst.shape() != src.shape())
        throw ShapeError("add_into: " + shape_string(dst.shape()) + " vs " + shape_string(src.shape()));
    auto d = dst.values();
    auto s = src.values();
    for (std::size_t i = 0; i < d.size(); ++i)
        d[i] += s[i];
}

} // namespace iharmon::nn
