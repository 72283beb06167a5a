#pragma once

// 8-bit PNG/JPEG reading and writing. Values are scaled by 1/255 on read and
// stored as round(255 v) on write. Masks are single-channel, 255 = selected.

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "iharmon/error.hpp"
#include "iharmon/imaging.hpp"

namespace iharmon {

using Bytes = std::vector<std::uint8_t>;

inline std::uint8_t to_byte(float v)
{
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

/// Rounds every value to the nearest 8-bit level, i.e. what a PNG round trip yields.
inline Image quantize8(const Image& img)
{
    Image out = img;
    for (auto& v : out.values())
        v = static_cast<float>(to_byte(v)) / 255.0f;
    return out;
}

inline Mask quantize8(const Mask& m)
{
    Mask out = m;
    for (auto& v : out.values())
        v = static_cast<float>(to_byte(v)) / 255.0f;
    return out;
}

inline Bytes read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error("cannot open " + path.string());
    return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw Error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw Error("short write to " + path.string());
}

namespace detail {

inline bool is_png(std::span<const std::uint8_t> b)
{
    static constexpr std::uint8_t sig[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
    return b.size() >= 8 && std::memcmp(b.data(), sig, 8) == 0;
}

inline bool is_jpeg(std::span<const std::uint8_t> b)
{
    return b.size() >= 3 && b[0] == 0xFF && b[1] == 0xD8 && b[2] == 0xFF;
}

inline Image decode_png(std::span<const std::uint8_t> bytes, int channels)
{
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_memory(&png, bytes.data(), bytes.size()))
        throw Error(std::string("png decode failed: ") + png.message);
    png.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    std::vector<std::uint8_t> raw(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, raw.data(), 0, nullptr)) {
        png_image_free(&png);
        throw Error(std::string("png decode failed: ") + png.message);
    }
    Image out(static_cast<int>(png.height), static_cast<int>(png.width), channels);
    std::transform(raw.begin(), raw.end(), out.values().begin(),
                   [](std::uint8_t v) { return static_cast<float>(v) / 255.0f; });
    return out;
}

struct JpegErrorManager {
    jpeg_error_mgr pub;
    std::jmp_buf jump;
    char message[JMSG_LENGTH_MAX];
};

inline void jpeg_error_exit(j_common_ptr cinfo)
{
    auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
    (*cinfo->err->format_message)(cinfo, err->message);
    std::longjmp(err->jump, 1);
}

inline Image decode_jpeg(std::span<const std::uint8_t> bytes, int channels)
{
    jpeg_decompress_struct cinfo{};
    JpegErrorManager err{};
    cinfo.err = jpeg_std_error(&err.pub);
    err.pub.error_exit = jpeg_error_exit;
    std::vector<std::uint8_t> raw;
    int h = 0;
    int w = 0;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        throw Error(std::string("jpeg decode failed: ") + err.message);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = channels == 1 ? JCS_GRAYSCALE : JCS_RGB;
    jpeg_start_decompress(&cinfo);
    h = static_cast<int>(cinfo.output_height);
    w = static_cast<int>(cinfo.output_width);
    const int stride = w * channels;
    raw.resize(static_cast<std::size_t>(h) * stride);
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = raw.data() + static_cast<std::size_t>(cinfo.output_scanline) * stride;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);

    Image out(h, w, channels);
    std::transform(raw.begin(), raw.end(), out.values().begin(),
                   [](std::uint8_t v) { return static_cast<float>(v) / 255.0f; });
    return out;
}

inline Bytes encode_png_raw(const std::vector<std::uint8_t>& raw, int h, int w, int channels)
{
    png_image png{};
    png.version = PNG_IMAGE_VERSION;
    png.width = static_cast<png_uint_32>(w);
    png.height = static_cast<png_uint_32>(h);
    png.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    png_alloc_size_t size = 0;
    if (!png_image_write_to_memory(&png, nullptr, &size, 0, raw.data(), 0, nullptr))
        throw Error(std::string("png encode failed: ") + png.message);
    Bytes out(size);
    if (!png_image_write_to_memory(&png, out.data(), &size, 0, raw.data(), 0, nullptr))
        throw Error(std::string("png encode failed: ") + png.message);
    out.resize(size);
    return out;
}

} // namespace detail

/// Decodes PNG or JPEG bytes into an image with the requested channel count (1 or 3).
inline Image decode_image(std::span<const std::uint8_t> bytes, int channels = 3)
{
    if (channels != 1 && channels != 3)
        throw Error("decode_image: channels must be 1 or 3");
    if (detail::is_png(bytes))
        return detail::decode_png(bytes, channels);
    if (detail::is_jpeg(bytes))
        return detail::decode_jpeg(bytes, channels);
    throw Error("unrecognized image format");
}

inline Mask decode_mask(std::span<const std::uint8_t> bytes)
{
    return image_to_mask(decode_image(bytes, 1));
}

inline Bytes encode_png(const Image& img)
{
    if (img.channels() != 1 && img.channels() != 3)
        throw Error("encode_png: channels must be 1 or 3");
    std::vector<std::uint8_t> raw(img.size());
    std::transform(img.values().begin(), img.values().end(), raw.begin(), to_byte);
    return detail::encode_png_raw(raw, img.height(), img.width(), img.channels());
}

inline Bytes encode_png(const Mask& m)
{
    return encode_png(mask_to_image(m));
}

inline Bytes encode_jpeg(const Image& img, int quality = 95)
{
    if (img.channels() != 3)
        throw Error("encode_jpeg: expected RGB");
    std::vector<std::uint8_t> raw(img.size());
    std::transform(img.values().begin(), img.values().end(), raw.begin(), to_byte);

    jpeg_compress_struct cinfo{};
    detail::JpegErrorManager err{};
    cinfo.err = jpeg_std_error(&err.pub);
    err.pub.error_exit = detail::jpeg_error_exit;
    unsigned char* mem = nullptr;
    unsigned long mem_size = 0;
    if (setjmp(err.jump)) {
        jpeg_destroy_compress(&cinfo);
        std::free(mem);
        throw Error(std::string("jpeg encode failed: ") + err.message);
    }
    jpeg_create_compress(&cinfo);
    jpeg_mem_dest(&cinfo, &mem, &mem_size);
    cinfo.image_width = static_cast<JDIMENSION>(img.width());
    cinfo.image_height = static_cast<JDIMENSION>(img.height());
    cinfo.input_components = 3;
    cinfo.in_color_space = JCS_RGB;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, quality, TRUE);
    jpeg_start_compress(&cinfo, TRUE);
    const int stride = img.width() * 3;
    while (cinfo.next_scanline < cinfo.image_height) {
        JSAMPROW row = raw.data() + static_cast<std::size_t>(cinfo.next_scanline) * stride;
        jpeg_write_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_compress(&cinfo);
    Bytes out(mem, mem + mem_size);
    jpeg_destroy_compress(&cinfo);
    std::free(mem);
    return out;
}

inline Image read_image(const std::filesystem::path& path)
{
    return decode_image(read_file(path), 3);
}

inline Mask read_mask(const std::filesystem::path& path)
{
    return decode_mask(read_file(path));
}

/// Writes PNG, or JPEG when the extension is .jpg/.jpeg.
inline void write_image(const std::filesystem::path& path, const Image& img)
{
    auto ext = path.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".jpg" || ext == ".jpeg")
        write_file(path, encode_jpeg(img));
    else
        write_file(path, encode_png(img));
}

inline void write_mask(const std::filesystem::path& path, const Mask& m)
{
    write_file(path, encode_png(m));
}

} // namespace iharmon
