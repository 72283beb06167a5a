#pragma once

// Procedural source scenes with instance masks, for tests and desk-scale runs.
// Every pixel is albedo * illumination * tint with one illumination level and
// tint per scene, shared by the background and all instances.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "iharmon/image_io.hpp"
#include "iharmon/imaging.hpp"
#include "iharmon/synthesis/dataset.hpp"

namespace iharmon::synthesis {

struct ToyScene {
    Image image;
    std::vector<Mask> instances;
    double illumination = 1.0;
};

struct ToySceneOptions {
    int size = 64;
    int min_instances = 3;
    int max_instances = 4;
    double min_illumination = 0.35;
    double max_illumination = 1.0;
};

inline ToyScene make_toy_scene(std::uint64_t seed, const ToySceneOptions& opt = {})
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const int s = opt.size;
    ToyScene scene;
    scene.illumination = opt.min_illumination + (opt.max_illumination - opt.min_illumination) * u(rng);
    std::array<double, 3> tint{};
    for (auto& t : tint)
        t = 0.9 + 0.2 * u(rng);

    // Background albedo: two colours blended along a random direction.
    std::array<double, 3> c0{}, c1{};
    for (int c = 0; c < 3; ++c) {
        c0[c] = 0.3 + 0.6 * u(rng);
        c1[c] = 0.3 + 0.6 * u(rng);
    }
    const double ang = 2 * M_PI * u(rng);
    std::vector<std::array<double, 3>> albedo(static_cast<std::size_t>(s) * s);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            const double t = 0.5 + 0.5 * ((x - s / 2.0) * std::cos(ang) + (y - s / 2.0) * std::sin(ang)) / (s / 2.0);
            const double k = std::clamp(t, 0.0, 1.0);
            for (int c = 0; c < 3; ++c)
                albedo[static_cast<std::size_t>(y) * s + x][c] = c0[c] + k * (c1[c] - c0[c]);
        }

    const int n = std::uniform_int_distribution<int>(opt.min_instances, opt.max_instances)(rng);
    std::vector<int> owner(albedo.size(), -1);
    for (int k = 0; k < n; ++k) {
        const bool ellipse = u(rng) < 0.5;
        const double cy = s * (0.2 + 0.6 * u(rng)), cx = s * (0.2 + 0.6 * u(rng));
        const double ry = s * (0.08 + 0.14 * u(rng)), rx = s * (0.08 + 0.14 * u(rng));
        std::array<double, 3> a{};
        for (auto& v : a)
            v = 0.15 + 0.8 * u(rng);
        const double shade = 0.3 * (u(rng) - 0.5);
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x) {
                const double dy = (y + 0.5 - cy) / ry, dx = (x + 0.5 - cx) / rx;
                const bool inside = ellipse ? dy * dy + dx * dx <= 1.0 : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
                if (!inside)
                    continue;
                const auto i = static_cast<std::size_t>(y) * s + x;
                owner[i] = k;
                for (int c = 0; c < 3; ++c)
                    albedo[i][c] = std::clamp(a[c] * (1.0 + shade * dy), 0.0, 1.0);
            }
    }

    scene.image = Image(s, s, 3);
    for (std::size_t i = 0; i < albedo.size(); ++i)
        for (int c = 0; c < 3; ++c)
            scene.image.values()[3 * i + c] =
                static_cast<float>(std::clamp(albedo[i][c] * scene.illumination * tint[c], 0.0, 1.0));
    scene.image = quantize8(scene.image);
    for (int k = 0; k < n; ++k) {
        Mask m(s, s);
        for (std::size_t i = 0; i < owner.size(); ++i)
            m[i] = owner[i] == k ? 1.0f : 0.0f;
        if (m.count_selected() > 0)
            scene.instances.push_back(std::move(m));
    }
    return scene;
}

/// Writes `count` toy scenes plus annotations.json under dir; returns the annotation path.
inline std::filesystem::path write_toy_sources(const std::filesystem::path& dir, std::size_t count,
                                               std::uint64_t seed, const ToySceneOptions& opt = {})
{
    std::filesystem::create_directories(dir / "images");
    std::filesystem::create_directories(dir / "masks");
    std::vector<SourceEntry> entries;
    for (std::size_t i = 0; i < count; ++i) {
        const auto scene = make_toy_scene(mix_seed(seed, i), opt);
        SourceEntry e;
        e.id = "toy" + record_id(i);
        e.image = dir / "images" / (e.id + ".png");
        write_image(e.image, scene.image);
        for (std::size_t k = 0; k < scene.instances.size(); ++k) {
            auto p = dir / "masks" / (e.id + "_" + std::to_string(k) + ".png");
            write_mask(p, scene.instances[k]);
            e.masks.push_back(std::move(p));
        }
        entries.push_back(std::move(e));
    }
    const auto ann = dir / "annotations.json";
    write_annotations(ann, entries);
    return ann;
}

} // namespace iharmon::synthesis
