#pragma once

// WeightArchive: named float32 tensors plus a JSON metadata record in one file.
//
// Layout (all integers little-endian):
//   char[8]  magic "IHWARCH1"
//   u32      metadata byte length, followed by UTF-8 JSON
//   u32      tensor count
//   per tensor:
//     u32 name length, name bytes
//     u32 rank, u32 dims[rank]
//     float32 values[prod(dims)]
//     u32 CRC-32 of the value bytes
//   char[4]  trailer "DONE"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <zlib.h>

#include "iharmon/error.hpp"
#include "iharmon/model.hpp"

namespace iharmon {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

struct ArchiveMetadata {
    int stage = 0;
    long long step = 0;
    std::string config_hash;
    ModelConfig config;
    /// Free-form extras (lineage, optimizer state bookkeeping, ...).
    nlohmann::json extra = nlohmann::json::object();
};

struct WeightArchive {
    ArchiveMetadata metadata;
    std::map<std::string, nn::Tensor> tensors;
};

/// Snapshot of a model's parameters.
inline WeightArchive make_archive(const HarmonizationModel& model, int stage = 0, long long step = 0)
{
    WeightArchive a;
    a.metadata.stage = stage;
    a.metadata.step = step;
    a.metadata.config = model.config();
    a.metadata.config_hash = model.config().hash();
    for (const auto& [name, v] : model.parameters().entries())
        a.tensors[name] = v->value;
    return a;
}

/// Copies archive tensors into the model; the config hash and parameter set must match.
inline void load_into(HarmonizationModel& model, const WeightArchive& a)
{
    if (a.metadata.config_hash != model.config().hash())
        throw Error("weight archive config hash " + a.metadata.config_hash + " does not match model " +
                    model.config().hash());
    for (const auto& [name, v] : model.parameters().entries()) {
        auto it = a.tensors.find(name);
        if (it == a.tensors.end())
            throw Error("weight archive is missing parameter " + name);
        if (it->second.shape() != v->value.shape())
            throw Error("weight archive parameter " + name + " has shape " + nn::shape_string(it->second.shape()) +
                        ", expected " + nn::shape_string(v->value.shape()));
        v->value = it->second;
    }
}

inline HarmonizationModel model_from_archive(const WeightArchive& a)
{
    HarmonizationModel model(a.metadata.config);
    load_into(model, a);
    return model;
}

namespace detail {

inline constexpr char kArchiveMagic[8] = {'I', 'H', 'W', 'A', 'R', 'C', 'H', '1'};
inline constexpr char kArchiveTrailer[4] = {'D', 'O', 'N', 'E'};

class ArchiveWriter {
public:
    explicit ArchiveWriter(const std::filesystem::path& path) : out_(path, std::ios::binary)
    {
        if (!out_)
            throw Error("cannot write weight archive " + path.string());
    }
    void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void finish()
    {
        out_.flush();
        if (!out_)
            throw Error("short write on weight archive");
    }

private:
    std::ofstream out_;
};

class ArchiveReader {
public:
    explicit ArchiveReader(const std::filesystem::path& path) : in_(path, std::ios::binary)
    {
        if (!in_)
            throw Error("cannot open weight archive " + path.string());
    }
    void bytes(void* p, std::size_t n, const std::string& context)
    {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n)
            throw Error("corrupt weight archive: truncated while reading " + context);
    }
    std::uint32_t u32(const std::string& context)
    {
        std::uint32_t v = 0;
        bytes(&v, 4, context);
        return v;
    }

private:
    std::ifstream in_;
};

} // namespace detail

inline void save_weights(const WeightArchive& a, const std::filesystem::path& path)
{
    detail::ArchiveWriter w(path);
    w.bytes(detail::kArchiveMagic, 8);
    nlohmann::json meta{{"stage", a.metadata.stage},
                        {"step", a.metadata.step},
                        {"config_hash", a.metadata.config_hash},
                        {"config", a.metadata.config},
                        {"extra", a.metadata.extra}};
    const std::string m = meta.dump();
    w.u32(static_cast<std::uint32_t>(m.size()));
    w.bytes(m.data(), m.size());
    w.u32(static_cast<std::uint32_t>(a.tensors.size()));
    for (const auto& [name, t] : a.tensors) {
        w.u32(static_cast<std::uint32_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.u32(static_cast<std::uint32_t>(t.rank()));
        for (int d : t.shape())
            w.u32(static_cast<std::uint32_t>(d));
        const std::size_t nbytes = t.numel() * sizeof(float);
        w.bytes(t.data(), nbytes);
        w.u32(static_cast<std::uint32_t>(
            crc32(0L, reinterpret_cast<const Bytef*>(t.data()), static_cast<uInt>(nbytes))));
    }
    w.bytes(detail::kArchiveTrailer, 4);
    w.finish();
}

inline WeightArchive load_weights(const std::filesystem::path& path)
{
    detail::ArchiveReader r(path);
    char magic[8];
    r.bytes(magic, 8, "header");
    if (std::memcmp(magic, detail::kArchiveMagic, 8) != 0)
        throw Error("not a weight archive: " + path.string());

    WeightArchive a;
    std::string meta(r.u32("metadata length"), '\0');
    r.bytes(meta.data(), meta.size(), "metadata");
    try {
        const auto j = nlohmann::json::parse(meta);
        a.metadata.stage = j.at("stage").get<int>();
        a.metadata.step = j.at("step").get<long long>();
        a.metadata.config_hash = j.at("config_hash").get<std::string>();
        a.metadata.config = j.at("config").get<ModelConfig>();
        a.metadata.extra = j.value("extra", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("corrupt weight archive metadata: ") + e.what());
    }
    if (a.metadata.config.hash() != a.metadata.config_hash)
        throw Error("corrupt weight archive: stored config does not match its hash");

    const std::uint32_t count = r.u32("tensor count");
    std::string previous = "tensor table";
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = r.u32("name of tensor after '" + previous + "'");
        if (name_len > 4096)
            throw Error("corrupt weight archive: implausible name length after '" + previous + "'");
        std::string name(name_len, '\0');
        r.bytes(name.data(), name.size(), "name of tensor after '" + previous + "'");
        const std::uint32_t rank = r.u32("shape of '" + name + "'");
        if (rank > 8)
            throw Error("corrupt weight archive: implausible rank for '" + name + "'");
        nn::Shape shape(rank);
        for (auto& d : shape) {
            d = static_cast<int>(r.u32("shape of '" + name + "'"));
            if (d < 0 || d > (1 << 24))
                throw Error("corrupt weight archive: implausible dimension for '" + name + "'");
        }
        nn::Tensor t(shape);
        const std::size_t nbytes = t.numel() * sizeof(float);
        r.bytes(t.data(), nbytes, "values of '" + name + "'");
        const std::uint32_t stored = r.u32("checksum of '" + name + "'");
        const auto actual = static_cast<std::uint32_t>(
            crc32(0L, reinterpret_cast<const Bytef*>(t.data()), static_cast<uInt>(nbytes)));
        if (stored != actual)
            throw Error("corrupt weight archive: checksum mismatch in '" + name + "'");
        a.tensors.emplace(name, std::move(t));
        previous = name;
    }
    char trailer[4];
    r.bytes(trailer, 4, "trailer");
    if (std::memcmp(trailer, detail::kArchiveTrailer, 4) != 0)
        throw Error("corrupt weight archive: bad trailer");
    return a;
}

/// Loads an archive and checks it against an expected configuration.
inline WeightArchive load_weights(const std::filesystem::path& path, const ModelConfig& expected)
{
    auto a = load_weights(path);
    if (a.metadata.config_hash != expected.hash())
        throw Error("weight archive " + path.string() + " was saved for config " + a.metadata.config_hash +
                    ", expected " + expected.hash());
    return a;
}

} // namespace iharmon
