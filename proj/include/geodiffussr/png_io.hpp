#pragma once

// PNG storage: textures as 8-bit RGB, DEMs as 16-bit grayscale. Thin libpng
// wrappers with fixed settings so byte-identical inputs produce
// byte-identical files.

#include <png.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <vector>

#include "geodiffussr/tensor.hpp"

namespace gdr {

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

inline void write_png_rgb8(const std::filesystem::path& path, const Tensor<float>& rgb) {
    check(rgb.rank() == 3 && rgb.dim(2) == 3, "write_png_rgb8: expects (H,W,3)");
    const int h = rgb.dim(0), w = rgb.dim(1);
    detail::FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    check(fp != nullptr, "cannot open for write: " + path.string());

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    check(png != nullptr, "png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        fail("png write failed: " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, png_uint_32(w), png_uint_32(h), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<unsigned char> row(size_t(w) * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w * 3; ++x) {
            float v = std::clamp(rgb[int64_t(y) * w * 3 + x], 0.0f, 1.0f);
            row[size_t(x)] = (unsigned char)std::lround(v * 255.0f);
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline Tensor<float> read_png_rgb8(const std::filesystem::path& path) {
    detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    check(fp != nullptr, "missing file: " + path.string());

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    check(png != nullptr, "png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail("png read failed: " + path.string());
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    const int h = int(png_get_image_height(png, info));
    const int w = int(png_get_image_width(png, info));
    check(png_get_color_type(png, info) == PNG_COLOR_TYPE_RGB &&
              png_get_bit_depth(png, info) == 8,
          "expected 8-bit RGB png: " + path.string());

    Tensor<float> out({h, w, 3});
    std::vector<unsigned char> row(size_t(w) * 3);
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w * 3; ++x)
            out[int64_t(y) * w * 3 + x] = float(row[size_t(x)]) / 255.0f;
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

inline void write_png_gray16(const std::filesystem::path& path, const Tensor<float>& gray) {
    check(gray.rank() == 2, "write_png_gray16: expects (H,W)");
    const int h = gray.dim(0), w = gray.dim(1);
    detail::FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    check(fp != nullptr, "cannot open for write: " + path.string());

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    check(png != nullptr, "png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        fail("png write failed: " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, png_uint_32(w), png_uint_32(h), 16, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<unsigned char> row(size_t(w) * 2);  // big-endian 16-bit
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            float v = std::clamp(gray[int64_t(y) * w + x], 0.0f, 1.0f);
            auto q = uint16_t(std::lround(v * 65535.0f));
            row[size_t(x) * 2] = (unsigned char)(q >> 8);
            row[size_t(x) * 2 + 1] = (unsigned char)(q & 0xff);
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline Tensor<float> read_png_gray16(const std::filesystem::path& path) {
    detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    check(fp != nullptr, "missing file: " + path.string());

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    check(png != nullptr, "png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail("png read failed: " + path.string());
    }
    png_init_io(png, fp.get());
    png_read_info(png, info);
    const int h = int(png_get_image_height(png, info));
    const int w = int(png_get_image_width(png, info));
    check(png_get_color_type(png, info) == PNG_COLOR_TYPE_GRAY &&
              png_get_bit_depth(png, info) == 16,
          "expected 16-bit grayscale png: " + path.string());

    Tensor<float> out({h, w});
    std::vector<unsigned char> row(size_t(w) * 2);
    for (int y = 0; y < h; ++y) {
        png_read_row(png, row.data(), nullptr);
        for (int x = 0; x < w; ++x) {
            uint16_t q = uint16_t((row[size_t(x) * 2] << 8) | row[size_t(x) * 2 + 1]);
            out[int64_t(y) * w + x] = float(q) / 65535.0f;
        }
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

}  // namespace gdr
