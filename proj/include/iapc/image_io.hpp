#pragma once

/// @file image_io.hpp
/// 8-bit PNG reading and writing through libpng.

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "iapc/common.hpp"

namespace iapc::io {

struct RawImage {
    int width = 0;
    int height = 0;
    int channels = 0;  // 1 or 3
    std::vector<std::uint8_t> pixels;
};

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const noexcept {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::filesystem::path& path, const char* mode) {
    FilePtr f(std::fopen(path.string().c_str(), mode));
    if (!f) {
        throw LoadError("cannot open " + path.string());
    }
    return f;
}

// Errors surface as exceptions with the file name; libpng's own messages
// would only duplicate them on stderr.
inline void png_error_quiet(png_structp png, png_const_charp) { png_longjmp(png, 1); }
inline void png_warning_quiet(png_structp, png_const_charp) {}

}  // namespace detail

inline void write_png(const std::filesystem::path& path, const RawImage& img) {
    if (img.channels != 1 && img.channels != 3) {
        throw ParameterError("write_png: only gray or RGB");
    }
    auto file = detail::open_file(path, "wb");
    png_structp png =
        png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_quiet, detail::png_warning_quiet);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw Error("write_png: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("write_png: libpng error writing " + path.string());
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
                 img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
    for (int y = 0; y < img.height; ++y) {
        png_write_row(png, const_cast<png_bytep>(img.pixels.data() + stride * y));
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

/// Reads 8-bit gray or RGB PNGs; palette and 16-bit inputs are rejected.
inline RawImage read_png(const std::filesystem::path& path) {
    auto file = detail::open_file(path, "rb");
    png_structp png =
        png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_quiet, detail::png_warning_quiet);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error("read_png: libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw LoadError("read_png: malformed PNG " + path.string());
    }
    png_init_io(png, file.get());
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    const auto depth = png_get_bit_depth(png, info);
    if (depth != 8 || (color != PNG_COLOR_TYPE_GRAY && color != PNG_COLOR_TYPE_RGB)) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw LoadError("read_png: " + path.string() + " is not 8-bit gray or RGB");
    }
    RawImage img;
    img.width = static_cast<int>(png_get_image_width(png, info));
    img.height = static_cast<int>(png_get_image_height(png, info));
    img.channels = color == PNG_COLOR_TYPE_RGB ? 3 : 1;
    const std::size_t stride = static_cast<std::size_t>(img.width) * img.channels;
    img.pixels.resize(stride * img.height);
    for (int y = 0; y < img.height; ++y) {
        png_read_row(png, img.pixels.data() + stride * y, nullptr);
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

inline std::uint8_t to_byte(float v) noexcept {
    const float c = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
    return static_cast<std::uint8_t>(std::lround(c * 255.f));
}

inline RawImage to_raw(const Image& image) {
    if (image.channels() != 3) {
        throw ParameterError("to_raw: expected 3 channels");
    }
    RawImage raw{image.width(), image.height(), 3, std::vector<std::uint8_t>(image.size())};
    for (std::size_t i = 0; i < image.size(); ++i) {
        raw.pixels[i] = to_byte(image.data()[i]);
    }
    return raw;
}

inline Image from_raw(const RawImage& raw) {
    if (raw.channels != 3) {
        throw LoadError("expected an RGB image");
    }
    Image image(raw.height, raw.width, 3);
    for (std::size_t i = 0; i < raw.pixels.size(); ++i) {
        image.data()[i] = static_cast<float>(raw.pixels[i]) / 255.f;
    }
    return image;
}

inline RawImage to_raw(const Grid2<std::uint8_t>& gray) {
    return RawImage{gray.width(), gray.height(), 1, {gray.data(), gray.data() + gray.size()}};
}

inline void write_image(const std::filesystem::path& path, const Image& image) { write_png(path, to_raw(image)); }

inline void write_labels(const std::filesystem::path& path, const LabelMap& labels) {
    write_png(path, to_raw(labels));
}

inline Image read_image(const std::filesystem::path& path) { return from_raw(read_png(path)); }

inline LabelMap read_labels(const std::filesystem::path& path) {
    const RawImage raw = read_png(path);
    if (raw.channels != 1) {
        throw LoadError("label file " + path.string() + " is not single-channel");
    }
    LabelMap labels(raw.height, raw.width);
    std::copy(raw.pixels.begin(), raw.pixels.end(), labels.data());
    return labels;
}

}  // namespace iapc::io
