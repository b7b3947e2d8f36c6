#pragma once

#include <algorithm>
#include <cstddef>
#include <vector>

#include "forgelens/image/image.hpp"

namespace forgelens {

/// Bilinear resample to out_w x out_h with half-pixel centers
/// (src = (dst + 0.5) * in/out - 0.5, clamped to the image).
/// Returns planar float samples in [0, 255], layout [c][y][x].
inline std::vector<float> resize_bilinear_planar(const ImageBuffer& img, int out_w, int out_h) {
    require_valid(img);
    if (out_w <= 0 || out_h <= 0) throw DimensionError("resize target must be positive");
    const double sx = static_cast<double>(img.width) / out_w;
    const double sy = static_cast<double>(img.height) / out_h;

    struct Tap {
        int i0, i1;
        double w1;
    };
    auto taps = [](int n_out, int n_in, double scale) {
        std::vector<Tap> t(static_cast<std::size_t>(n_out));
        for (int o = 0; o < n_out; ++o) {
            double src = (o + 0.5) * scale - 0.5;
            src = std::clamp(src, 0.0, static_cast<double>(n_in - 1));
            const int i0 = static_cast<int>(src);
            const int i1 = std::min(i0 + 1, n_in - 1);
            t[static_cast<std::size_t>(o)] = {i0, i1, src - i0};
        }
        return t;
    };
    const auto tx = taps(out_w, img.width, sx);
    const auto ty = taps(out_h, img.height, sy);

    std::vector<float> out(static_cast<std::size_t>(3) * static_cast<std::size_t>(out_w) * static_cast<std::size_t>(out_h));
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < out_h; ++y) {
            const Tap& a = ty[static_cast<std::size_t>(y)];
            for (int x = 0; x < out_w; ++x) {
                const Tap& b = tx[static_cast<std::size_t>(x)];
                const double top = img.at(b.i0, a.i0, c) * (1.0 - b.w1) + img.at(b.i1, a.i0, c) * b.w1;
                const double bot = img.at(b.i0, a.i1, c) * (1.0 - b.w1) + img.at(b.i1, a.i1, c) * b.w1;
                out[(static_cast<std::size_t>(c) * static_cast<std::size_t>(out_h) + static_cast<std::size_t>(y)) *
                        static_cast<std::size_t>(out_w) +
                    static_cast<std::size_t>(x)] = static_cast<float>(top * (1.0 - a.w1) + bot * a.w1);
            }
        }
    }
    return out;
}

} // namespace forgelens
