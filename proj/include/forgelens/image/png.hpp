#pragma once

#include <png.h>

#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "forgelens/core/error.hpp"
#include "forgelens/image/image.hpp"

namespace forgelens {

/// Decode any PNG (palette, gray, 16-bit, alpha) to 8-bit RGB.
inline ImageBuffer read_png(const std::filesystem::path& path) {
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str()))
        throw IoError("cannot read PNG '" + path.string() + "': " + image.message);
    image.format = PNG_FORMAT_RGB;
    if (image.width == 0 || image.height == 0 || image.width > 1u << 15 || image.height > 1u << 15) {
        png_image_free(&image);
        throw IoError("unsupported PNG dimensions in '" + path.string() + "'");
    }
    ImageBuffer img(static_cast<int>(image.width), static_cast<int>(image.height));
    if (!png_image_finish_read(&image, nullptr, img.pixels.data(), 0, nullptr)) {
        const std::string msg = image.message;
        png_image_free(&image);
        throw IoError("cannot decode PNG '" + path.string() + "': " + msg);
    }
    return img;
}

/// Write 8-bit RGB PNG. No timestamp or text chunks, so output bytes depend
/// only on pixel content.
inline void write_png(const std::filesystem::path& path, const ImageBuffer& img) {
    require_valid(img);
    png_image image;
    std::memset(&image, 0, sizeof image);
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&image, path.c_str(), 0, img.pixels.data(), 0, nullptr))
        throw IoError("cannot write PNG '" + path.string() + "': " + image.message);
}

} // namespace forgelens
