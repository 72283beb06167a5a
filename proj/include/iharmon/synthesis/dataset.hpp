#pragma once

// Composite-sample synthesis: one instance becomes the foreground and is
// re-styled by a random augmentation, another instance becomes the guide.
//
// Annotation file (JSON):
//   {"images": [{"id": "...", "file": "img.png", "masks": ["m0.png", "m1.png", ...]}]}
// Paths are relative to the annotation file.
//
// Dataset layout: <out>/<id>/{composite,gt,fg_mask,guide_mask}.png plus <out>/manifest.json.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iharmon/error.hpp"
#include "iharmon/image_io.hpp"
#include "iharmon/imaging.hpp"
#include "iharmon/synthesis/augment.hpp"

namespace iharmon::synthesis {

inline constexpr double kMinInstanceFraction = 0.005;
inline constexpr double kMaxInstanceFraction = 0.60;

struct SampleMeta {
    std::string id;
    std::string source;
    AugmentationDescriptor augmentation;
    std::uint64_t seed = 0;
    friend bool operator==(const SampleMeta&, const SampleMeta&) = default;
};

inline void to_json(nlohmann::json& j, const SampleMeta& m)
{
    j = nlohmann::json{{"id", m.id}, {"source", m.source}, {"augmentation", m.augmentation}, {"seed", m.seed}};
}

inline void from_json(const nlohmann::json& j, SampleMeta& m)
{
    j.at("id").get_to(m.id);
    m.source = j.value("source", std::string{});
    if (j.contains("augmentation"))
        j.at("augmentation").get_to(m.augmentation);
    m.seed = j.value("seed", std::uint64_t{0});
}

struct CompositeSample {
    Image composite;
    Image ground_truth;
    Mask fg_mask;
    Mask guide_mask;
    SampleMeta meta;
};

/// Checks the record invariants; returns an empty string when they hold, else the first violation.
inline std::string check_sample(const CompositeSample& s)
{
    if (!s.composite.same_shape(s.ground_truth) || s.composite.channels() != 3)
        return "composite and ground truth differ in shape";
    if (!s.fg_mask.aligned_with(s.composite) || !s.guide_mask.aligned_with(s.composite))
        return "masks are not aligned with the images";
    std::size_t fg = 0, guide = 0, overlap = 0;
    for (std::size_t i = 0; i < s.fg_mask.size(); ++i) {
        for (float v : {s.fg_mask[i], s.guide_mask[i]})
            if (v != 0.0f && v != 1.0f)
                return "mask is not binary";
        const bool f = s.fg_mask.selected(i), g = s.guide_mask.selected(i);
        fg += f;
        guide += g;
        overlap += f && g;
        if (!f)
            for (int c = 0; c < 3; ++c)
                if (to_byte(s.composite.values()[3 * i + c]) != to_byte(s.ground_truth.values()[3 * i + c]))
                    return "composite differs from ground truth outside the foreground";
    }
    if (fg == 0)
        return "empty foreground mask";
    if (guide == 0)
        return "empty guide mask";
    if (overlap * 100 > s.fg_mask.size())
        return "foreground and guide overlap by more than 1%";
    return {};
}

/// Masks usable as foreground or guide: binarized, covering 0.5%..60% of the image.
inline std::vector<Mask> usable_instances(const std::vector<Mask>& masks, int h, int w)
{
    std::vector<Mask> out;
    const double n = static_cast<double>(h) * w;
    for (const auto& m : masks) {
        if (m.height() != h || m.width() != w)
            continue;
        auto b = binarize(m);
        const double frac = static_cast<double>(b.count_selected()) / n;
        if (frac >= kMinInstanceFraction && frac <= kMaxInstanceFraction)
            out.push_back(std::move(b));
    }
    return out;
}

/// Draws one composite sample. Throws Error("unusable image") when no valid instance pair exists.
inline CompositeSample build_sample(const Image& src, const std::vector<Mask>& instance_masks, std::mt19937_64& rng)
{
    if (src.channels() != 3)
        throw ShapeError("source image must be RGB");
    const auto inst = usable_instances(instance_masks, src.height(), src.width());

    // Ordered (fg, guide) pairs whose guide keeps pixels once the foreground is removed.
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t f = 0; f < inst.size(); ++f)
        for (std::size_t g = 0; g < inst.size(); ++g) {
            if (f == g)
                continue;
            bool keeps = false;
            for (std::size_t i = 0; i < inst[f].size() && !keeps; ++i)
                keeps = inst[g].selected(i) && !inst[f].selected(i);
            if (keeps)
                pairs.emplace_back(f, g);
        }
    if (pairs.empty())
        throw Error("unusable image");
    const auto [fi, gi] = pairs[std::uniform_int_distribution<std::size_t>(0, pairs.size() - 1)(rng)];

    CompositeSample s;
    s.fg_mask = inst[fi];
    s.guide_mask = inst[gi];
    for (std::size_t i = 0; i < s.guide_mask.size(); ++i)
        if (s.fg_mask.selected(i))
            s.guide_mask[i] = 0.0f;
    s.meta.augmentation = sample_augmentation(rng);
    s.ground_truth = src;
    s.composite = apply_augmentation(src, s.fg_mask, s.meta.augmentation);
    return s;
}

inline CompositeSample build_sample(const Image& src, const std::vector<Mask>& instance_masks, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    auto s = build_sample(src, instance_masks, rng);
    s.meta.seed = seed;
    return s;
}

/// SplitMix64 step; record seeds are mix(seed, index) so they do not depend on processing order.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index)
{
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (index + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

struct SourceEntry {
    std::string id;
    std::filesystem::path image;
    std::vector<std::filesystem::path> masks;
};

inline std::vector<SourceEntry> read_annotations(const std::filesystem::path& file)
{
    std::ifstream in(file);
    if (!in)
        throw Error("cannot open annotation file " + file.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error("malformed annotation file " + file.string() + ": " + e.what());
    }
    const auto base = file.parent_path();
    std::vector<SourceEntry> out;
    for (const auto& e : j.at("images")) {
        SourceEntry s;
        s.image = base / e.at("file").get<std::string>();
        s.id = e.value("id", s.image.stem().string());
        for (const auto& m : e.at("masks"))
            s.masks.push_back(base / m.get<std::string>());
        out.push_back(std::move(s));
    }
    return out;
}

inline void write_annotations(const std::filesystem::path& file, const std::vector<SourceEntry>& entries)
{
    const auto base = file.parent_path();
    nlohmann::json images = nlohmann::json::array();
    for (const auto& e : entries) {
        nlohmann::json masks = nlohmann::json::array();
        for (const auto& m : e.masks)
            masks.push_back(std::filesystem::relative(m, base).generic_string());
        images.push_back(
            {{"id", e.id}, {"file", std::filesystem::relative(e.image, base).generic_string()}, {"masks", masks}});
    }
    std::ofstream(file) << nlohmann::json{{"images", images}}.dump(2) << '\n';
}

struct Manifest {
    std::uint64_t seed = 0;
    std::vector<SampleMeta> records;
};

inline void to_json(nlohmann::json& j, const Manifest& m)
{
    j = nlohmann::json{{"seed", m.seed}, {"count", m.records.size()}, {"records", m.records}};
}

inline void from_json(const nlohmann::json& j, Manifest& m)
{
    m.seed = j.value("seed", std::uint64_t{0});
    j.at("records").get_to(m.records);
}

inline std::string record_id(std::size_t index)
{
    std::ostringstream os;
    os << std::setw(6) << std::setfill('0') << index;
    return os.str();
}

inline void write_sample(const std::filesystem::path& dir, const CompositeSample& s)
{
    std::filesystem::create_directories(dir);
    write_image(dir / "composite.png", s.composite);
    write_image(dir / "gt.png", s.ground_truth);
    write_mask(dir / "fg_mask.png", s.fg_mask);
    write_mask(dir / "guide_mask.png", s.guide_mask);
}

inline CompositeSample read_sample(const std::filesystem::path& dir, SampleMeta meta = {})
{
    CompositeSample s;
    s.composite = read_image(dir / "composite.png");
    s.ground_truth = read_image(dir / "gt.png");
    s.fg_mask = binarize(read_mask(dir / "fg_mask.png"));
    s.guide_mask = std::filesystem::exists(dir / "guide_mask.png") ? binarize(read_mask(dir / "guide_mask.png"))
                                                                   : invert(s.fg_mask);
    if (meta.id.empty())
        meta.id = dir.filename().string();
    s.meta = std::move(meta);
    if (!s.composite.same_shape(s.ground_truth) || !s.fg_mask.aligned_with(s.composite) ||
        !s.guide_mask.aligned_with(s.composite))
        throw ShapeError("sample " + dir.string() + " has inconsistent image sizes");
    return s;
}

inline Manifest read_manifest(const std::filesystem::path& dataset_dir)
{
    std::ifstream in(dataset_dir / "manifest.json");
    if (!in)
        throw Error("no manifest.json in " + dataset_dir.string());
    nlohmann::json j;
    try {
        in >> j;
        return j.get<Manifest>();
    } catch (const nlohmann::json::exception& e) {
        throw Error("malformed manifest in " + dataset_dir.string() + ": " + e.what());
    }
}

inline std::vector<CompositeSample> load_dataset(const std::filesystem::path& dataset_dir)
{
    std::vector<CompositeSample> out;
    for (const auto& r : read_manifest(dataset_dir).records)
        out.push_back(read_sample(dataset_dir / r.id, r));
    return out;
}

using WarningSink = std::function<void(const std::string&)>;

inline void stderr_warning(const std::string& msg)
{
    std::cerr << "warning: " << msg << '\n';
}

/// Writes `count` samples and the manifest. Record i draws its source from a seeded permutation
/// (cycling when count exceeds the sources) and its content from mix_seed(seed, i).
/// Unreadable or unusable sources are skipped with a warning; fewer records are written only
/// when no usable source remains.
inline Manifest build_dataset(const std::vector<SourceEntry>& sources, const std::filesystem::path& out_dir,
                              std::size_t count, std::uint64_t seed, const WarningSink& warn = stderr_warning)
{
    std::filesystem::create_directories(out_dir);
    Manifest manifest{seed, {}};
    std::vector<std::size_t> order(sources.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 perm_rng(mix_seed(seed, ~std::uint64_t{0}));
    std::shuffle(order.begin(), order.end(), perm_rng);
    std::vector<bool> dead(sources.size(), false);
    std::size_t alive = sources.size();

    std::size_t cursor = 0;
    for (std::size_t i = 0; i < count && alive > 0;) {
        const auto& src = sources[order[cursor % order.size()]];
        const std::size_t si = order[cursor % order.size()];
        ++cursor;
        if (dead[si])
            continue;
        const std::uint64_t rs = mix_seed(seed, i);
        try {
            const auto img = read_image(src.image);
            std::vector<Mask> masks;
            for (const auto& m : src.masks)
                masks.push_back(read_mask(m));
            auto s = build_sample(img, masks, rs);
            s.meta.id = record_id(i);
            s.meta.source = src.id;
            write_sample(out_dir / s.meta.id, s);
            manifest.records.push_back(s.meta);
            ++i;
        } catch (const Error& e) {
            warn("skipping source '" + src.id + "': " + e.what());
            dead[si] = true;
            --alive;
        }
    }
    if (manifest.records.size() < count)
        warn("sources exhausted after " + std::to_string(manifest.records.size()) + " of " + std::to_string(count) +
             " records");
    std::ofstream(out_dir / "manifest.json") << nlohmann::json(manifest).dump(2) << '\n';
    return manifest;
}

inline Manifest build_dataset(const std::filesystem::path& annotations, const std::filesystem::path& out_dir,
                              std::size_t count, std::uint64_t seed, const WarningSink& warn = stderr_warning)
{
    return build_dataset(read_annotations(annotations), out_dir, count, seed, warn);
}

} // namespace iharmon::synthesis
