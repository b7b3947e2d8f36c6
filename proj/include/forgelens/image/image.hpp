#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "forgelens/core/error.hpp"

namespace forgelens {

/// 8-bit RGB raster, row-major, channels interleaved.
struct ImageBuffer {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;

    ImageBuffer() = default;
    ImageBuffer(int w, int h, std::uint8_t fill = 0) : width(w), height(h) {
        if (w <= 0 || h <= 0) throw DimensionError("image dimensions must be positive");
        pixels.assign(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3, fill);
    }

    std::uint8_t& at(int x, int y, int c) { return pixels[index(x, y, c)]; }
    std::uint8_t at(int x, int y, int c) const { return pixels[index(x, y, c)]; }

    bool valid() const {
        return width > 0 && height > 0 &&
               pixels.size() == static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * 3;
    }

    friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;

private:
    std::size_t index(int x, int y, int c) const {
        return (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) * 3 +
               static_cast<std::size_t>(c);
    }
};

inline void require_valid(const ImageBuffer& img) {
    if (img.width <= 0 || img.height <= 0) throw DimensionError("image has zero extent");
    if (!img.valid()) throw DimensionError("pixel buffer length does not match width*height*3");
}

} // namespace forgelens
