#pragma once

// Baseline sequential JPEG (ITU-T T.81), 8-bit samples, Huffman coded.
//
// The arithmetic is the integer pipeline of the IJG reference codec: slow-but-
// accurate integer DCT/IDCT (13-bit constants, two passes), fixed-point
// YCbCr tables with 16 fractional bits, Annex K quantization tables with the
// IJG linear quality scaling, 1/2-biased box downsampling and triangle
// ("fancy") upsampling. Any conforming build of that pipeline decodes our
// streams to the same bytes, and our decoder reproduces its output for the
// streams it writes.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "forgelens/core/error.hpp"
#include "forgelens/image/image.hpp"

namespace forgelens {

enum class ChromaSubsampling { yuv420, yuv444 };

inline std::string to_string(ChromaSubsampling s) { return s == ChromaSubsampling::yuv420 ? "4:2:0" : "4:4:4"; }

inline ChromaSubsampling parse_subsampling(const std::string& s) {
    if (s == "4:2:0" || s == "420") return ChromaSubsampling::yuv420;
    if (s == "4:4:4" || s == "444") return ChromaSubsampling::yuv444;
    throw ConfigError("unknown chroma subsampling '" + s + "' (expected 4:2:0 or 4:4:4)");
}

struct JpegOptions {
    int quality = 90;
    ChromaSubsampling subsampling = ChromaSubsampling::yuv420;
};

namespace jpeg_detail {

inline constexpr int kBlock = 8;

// kZigzag[k] = natural (row-major) index of the k-th coefficient in scan order.
inline constexpr std::array<int, 64> kZigzag = {
    0,  1,  8,  16, 9,  2,  3,  10, 17, 24, 32, 25, 18, 11, 4,  5,  12, 19, 26, 33, 40, 48,
    41, 34, 27, 20, 13, 6,  7,  14, 21, 28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23,
    30, 37, 44, 51, 58, 59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63};

// Annex K.1, natural order.
inline constexpr std::array<int, 64> kLumaQuant = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

inline constexpr std::array<int, 64> kChromaQuant = {
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99, 24, 26, 56, 99, 99, 99,
    99, 99, 47, 66, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99};

struct HuffmanSpec {
    std::array<std::uint8_t, 16> bits;
    std::vector<std::uint8_t> values;
};

// Annex K.3 typical tables.
inline const HuffmanSpec& dc_luma_spec() {
    static const HuffmanSpec s{{0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11}};
    return s;
}

inline const HuffmanSpec& dc_chroma_spec() {
    static const HuffmanSpec s{{0, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0}, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11}};
    return s;
}

inline const HuffmanSpec& ac_luma_spec() {
    static const HuffmanSpec s{
        {0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7d},
        {0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06, 0x13, 0x51, 0x61, 0x07, 0x22,
         0x71, 0x14, 0x32, 0x81, 0x91, 0xa1, 0x08, 0x23, 0x42, 0xb1, 0xc1, 0x15, 0x52, 0xd1, 0xf0, 0x24, 0x33,
         0x62, 0x72, 0x82, 0x09, 0x0a, 0x16, 0x17, 0x18, 0x19, 0x1a, 0x25, 0x26, 0x27, 0x28, 0x29, 0x2a, 0x34,
         0x35, 0x36, 0x37, 0x38, 0x39, 0x3a, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49, 0x4a, 0x53, 0x54, 0x55,
         0x56, 0x57, 0x58, 0x59, 0x5a, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69, 0x6a, 0x73, 0x74, 0x75, 0x76,
         0x77, 0x78, 0x79, 0x7a, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89, 0x8a, 0x92, 0x93, 0x94, 0x95, 0x96,
         0x97, 0x98, 0x99, 0x9a, 0xa2, 0xa3, 0xa4, 0xa5, 0xa6, 0xa7, 0xa8, 0xa9, 0xaa, 0xb2, 0xb3, 0xb4, 0xb5,
         0xb6, 0xb7, 0xb8, 0xb9, 0xba, 0xc2, 0xc3, 0xc4, 0xc5, 0xc6, 0xc7, 0xc8, 0xc9, 0xca, 0xd2, 0xd3, 0xd4,
         0xd5, 0xd6, 0xd7, 0xd8, 0xd9, 0xda, 0xe1, 0xe2, 0xe3, 0xe4, 0xe5, 0xe6, 0xe7, 0xe8, 0xe9, 0xea, 0xf1,
         0xf2, 0xf3, 0xf4, 0xf5, 0xf6, 0xf7, 0xf8, 0xf9, 0xfa}};
    return s;
}

inline const HuffmanSpec& ac_chroma_spec() {
    static const HuffmanSpec s{
        {0, 2, 1, 2, 4, 4, 3, 4, 7, 5, 4, 4, 0, 1, 2, 0x77},
        {0x00, 0x01, 0x02, 0x03, 0x11, 0x04, 0x05, 0x21, 0x31, 0x06, 0x12, 0x41, 0x51, 0x07, 0x61, 0x71, 0x13,
         0x22, 0x32, 0x81, 0x08, 0x14, 0x42, 0x91, 0xa1, 0xb1, 0xc1, 0x09, 0x23, 0x33, 0x52, 0xf0, 0x15, 0x62,
         0x72, 0xd1, 0x0a, 0x16, 0x24, 0x34, 0xe1, 0x25, 0xf1, 0x17, 0x18, 0x19, 0x1a, 0x26, 0x27, 0x28, 0x29,
         0x2a, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3a, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49, 0x4a, 0x53, 0x54,
         0x55, 0x56, 0x57, 0x58, 0x59, 0x5a, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69, 0x6a, 0x73, 0x74, 0x75,
         0x76, 0x77, 0x78, 0x79, 0x7a, 0x82, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89, 0x8a, 0x92, 0x93, 0x94,
         0x95, 0x96, 0x97, 0x98, 0x99, 0x9a, 0xa2, 0xa3, 0xa4, 0xa5, 0xa6, 0xa7, 0xa8, 0xa9, 0xaa, 0xb2, 0xb3,
         0xb4, 0xb5, 0xb6, 0xb7, 0xb8, 0xb9, 0xba, 0xc2, 0xc3, 0xc4, 0xc5, 0xc6, 0xc7, 0xc8, 0xc9, 0xca, 0xd2,
         0xd3, 0xd4, 0xd5, 0xd6, 0xd7, 0xd8, 0xd9, 0xda, 0xe2, 0xe3, 0xe4, 0xe5, 0xe6, 0xe7, 0xe8, 0xe9, 0xea,
         0xf2, 0xf3, 0xf4, 0xf5, 0xf6, 0xf7, 0xf8, 0xf9, 0xfa}};
    return s;
}

// ---------------------------------------------------------------------------
// Integer DCT (IJG "islow": CONST_BITS = 13, PASS1_BITS = 2)

inline constexpr int kConstBits = 13;
inline constexpr int kPass1Bits = 2;

inline constexpr std::int64_t kFix_0_298631336 = 2446;
inline constexpr std::int64_t kFix_0_390180644 = 3196;
inline constexpr std::int64_t kFix_0_541196100 = 4433;
inline constexpr std::int64_t kFix_0_765366865 = 6270;
inline constexpr std::int64_t kFix_0_899976223 = 7373;
inline constexpr std::int64_t kFix_1_175875602 = 9633;
inline constexpr std::int64_t kFix_1_501321110 = 12299;
inline constexpr std::int64_t kFix_1_847759065 = 15137;
inline constexpr std::int64_t kFix_1_961570560 = 16069;
inline constexpr std::int64_t kFix_2_053119869 = 16819;
inline constexpr std::int64_t kFix_2_562915447 = 20995;
inline constexpr std::int64_t kFix_3_072711026 = 25172;

constexpr std::int64_t descale(std::int64_t x, int n) { return (x + (std::int64_t{1} << (n - 1))) >> n; }

/// Forward DCT in place on level-shifted samples; output is scaled up by 8.
inline void forward_dct(std::array<std::int32_t, 64>& data) {
    for (int row = 0; row < 8; ++row) {
        std::int32_t* d = data.data() + row * 8;
        const std::int64_t tmp0 = d[0] + d[7], tmp7 = d[0] - d[7];
        const std::int64_t tmp1 = d[1] + d[6], tmp6 = d[1] - d[6];
        const std::int64_t tmp2 = d[2] + d[5], tmp5 = d[2] - d[5];
        const std::int64_t tmp3 = d[3] + d[4], tmp4 = d[3] - d[4];

        const std::int64_t tmp10 = tmp0 + tmp3, tmp13 = tmp0 - tmp3;
        const std::int64_t tmp11 = tmp1 + tmp2, tmp12 = tmp1 - tmp2;

        d[0] = static_cast<std::int32_t>((tmp10 + tmp11) * (1 << kPass1Bits));
        d[4] = static_cast<std::int32_t>((tmp10 - tmp11) * (1 << kPass1Bits));

        std::int64_t z1 = (tmp12 + tmp13) * kFix_0_541196100;
        d[2] = static_cast<std::int32_t>(descale(z1 + tmp13 * kFix_0_765366865, kConstBits - kPass1Bits));
        d[6] = static_cast<std::int32_t>(descale(z1 - tmp12 * kFix_1_847759065, kConstBits - kPass1Bits));

        z1 = tmp4 + tmp7;
        std::int64_t z2 = tmp5 + tmp6;
        std::int64_t z3 = tmp4 + tmp6;
        std::int64_t z4 = tmp5 + tmp7;
        const std::int64_t z5 = (z3 + z4) * kFix_1_175875602;

        const std::int64_t t4 = tmp4 * kFix_0_298631336;
        const std::int64_t t5 = tmp5 * kFix_2_053119869;
        const std::int64_t t6 = tmp6 * kFix_3_072711026;
        const std::int64_t t7 = tmp7 * kFix_1_501321110;
        z1 *= -kFix_0_899976223;
        z2 *= -kFix_2_562915447;
        z3 = z3 * -kFix_1_961570560 + z5;
        z4 = z4 * -kFix_0_390180644 + z5;

        d[7] = static_cast<std::int32_t>(descale(t4 + z1 + z3, kConstBits - kPass1Bits));
        d[5] = static_cast<std::int32_t>(descale(t5 + z2 + z4, kConstBits - kPass1Bits));
        d[3] = static_cast<std::int32_t>(descale(t6 + z2 + z3, kConstBits - kPass1Bits));
        d[1] = static_cast<std::int32_t>(descale(t7 + z1 + z4, kConstBits - kPass1Bits));
    }
    for (int col = 0; col < 8; ++col) {
        std::int32_t* d = data.data() + col;
        const std::int64_t tmp0 = d[0] + d[56], tmp7 = d[0] - d[56];
        const std::int64_t tmp1 = d[8] + d[48], tmp6 = d[8] - d[48];
        const std::int64_t tmp2 = d[16] + d[40], tmp5 = d[16] - d[40];
        const std::int64_t tmp3 = d[24] + d[32], tmp4 = d[24] - d[32];

        const std::int64_t tmp10 = tmp0 + tmp3, tmp13 = tmp0 - tmp3;
        const std::int64_t tmp11 = tmp1 + tmp2, tmp12 = tmp1 - tmp2;

        d[0] = static_cast<std::int32_t>(descale(tmp10 + tmp11, kPass1Bits));
        d[32] = static_cast<std::int32_t>(descale(tmp10 - tmp11, kPass1Bits));

        std::int64_t z1 = (tmp12 + tmp13) * kFix_0_541196100;
        d[16] = static_cast<std::int32_t>(descale(z1 + tmp13 * kFix_0_765366865, kConstBits + kPass1Bits));
        d[48] = static_cast<std::int32_t>(descale(z1 - tmp12 * kFix_1_847759065, kConstBits + kPass1Bits));

        z1 = tmp4 + tmp7;
        std::int64_t z2 = tmp5 + tmp6;
        std::int64_t z3 = tmp4 + tmp6;
        std::int64_t z4 = tmp5 + tmp7;
        const std::int64_t z5 = (z3 + z4) * kFix_1_175875602;

        const std::int64_t t4 = tmp4 * kFix_0_298631336;
        const std::int64_t t5 = tmp5 * kFix_2_053119869;
        const std::int64_t t6 = tmp6 * kFix_3_072711026;
        const std::int64_t t7 = tmp7 * kFix_1_501321110;
        z1 *= -kFix_0_899976223;
        z2 *= -kFix_2_562915447;
        z3 = z3 * -kFix_1_961570560 + z5;
        z4 = z4 * -kFix_0_390180644 + z5;

        d[56] = static_cast<std::int32_t>(descale(t4 + z1 + z3, kConstBits + kPass1Bits));
        d[40] = static_cast<std::int32_t>(descale(t5 + z2 + z4, kConstBits + kPass1Bits));
        d[24] = static_cast<std::int32_t>(descale(t6 + z2 + z3, kConstBits + kPass1Bits));
        d[8] = static_cast<std::int32_t>(descale(t7 + z1 + z4, kConstBits + kPass1Bits));
    }
}

/// Post-IDCT range limiting, including the wrap-around of out-of-range
/// values through a 10-bit mask that the reference table layout implies.
inline std::uint8_t idct_range_limit(std::int64_t x) {
    const int idx = static_cast<int>(x & 0x3FF);
    if (idx < 128) return static_cast<std::uint8_t>(idx + 128);
    if (idx < 512) return 255;
    if (idx < 896) return 0;
    return static_cast<std::uint8_t>(idx - 896);
}

/// Dequantize + inverse DCT one block (coefficients in natural order).
inline void inverse_dct(const std::int16_t* coef, const std::array<std::uint16_t, 64>& quant, std::uint8_t* out,
                        std::size_t stride) {
    std::array<std::int64_t, 64> ws{};
    for (int col = 0; col < 8; ++col) {
        auto in = [&](int r) { return std::int64_t{coef[r * 8 + col]} * quant[static_cast<std::size_t>(r * 8 + col)]; };

        std::int64_t z2 = in(2);
        std::int64_t z3 = in(6);
        std::int64_t z1 = (z2 + z3) * kFix_0_541196100;
        const std::int64_t tmp2e = z1 - z3 * kFix_1_847759065;
        const std::int64_t tmp3e = z1 + z2 * kFix_0_765366865;
        z2 = in(0);
        z3 = in(4);
        const std::int64_t tmp0e = (z2 + z3) * (std::int64_t{1} << kConstBits);
        const std::int64_t tmp1e = (z2 - z3) * (std::int64_t{1} << kConstBits);
        const std::int64_t tmp10 = tmp0e + tmp3e, tmp13 = tmp0e - tmp3e;
        const std::int64_t tmp11 = tmp1e + tmp2e, tmp12 = tmp1e - tmp2e;

        std::int64_t tmp0 = in(7), tmp1 = in(5), tmp2 = in(3), tmp3 = in(1);
        z1 = tmp0 + tmp3;
        z2 = tmp1 + tmp2;
        z3 = tmp0 + tmp2;
        std::int64_t z4 = tmp1 + tmp3;
        const std::int64_t z5 = (z3 + z4) * kFix_1_175875602;
        tmp0 *= kFix_0_298631336;
        tmp1 *= kFix_2_053119869;
        tmp2 *= kFix_3_072711026;
        tmp3 *= kFix_1_501321110;
        z1 *= -kFix_0_899976223;
        z2 *= -kFix_2_562915447;
        z3 = z3 * -kFix_1_961570560 + z5;
        z4 = z4 * -kFix_0_390180644 + z5;
        tmp0 += z1 + z3;
        tmp1 += z2 + z4;
        tmp2 += z2 + z3;
        tmp3 += z1 + z4;

        constexpr int s = kConstBits - kPass1Bits;
        ws[0 * 8 + col] = static_cast<std::int32_t>(descale(tmp10 + tmp3, s));
        ws[7 * 8 + col] = static_cast<std::int32_t>(descale(tmp10 - tmp3, s));
        ws[1 * 8 + col] = static_cast<std::int32_t>(descale(tmp11 + tmp2, s));
        ws[6 * 8 + col] = static_cast<std::int32_t>(descale(tmp11 - tmp2, s));
        ws[2 * 8 + col] = static_cast<std::int32_t>(descale(tmp12 + tmp1, s));
        ws[5 * 8 + col] = static_cast<std::int32_t>(descale(tmp12 - tmp1, s));
        ws[3 * 8 + col] = static_cast<std::int32_t>(descale(tmp13 + tmp0, s));
        ws[4 * 8 + col] = static_cast<std::int32_t>(descale(tmp13 - tmp0, s));
    }
    for (int row = 0; row < 8; ++row) {
        const std::int64_t* w = ws.data() + row * 8;
        std::uint8_t* o = out + static_cast<std::size_t>(row) * stride;

        std::int64_t z2 = w[2];
        std::int64_t z3 = w[6];
        std::int64_t z1 = (z2 + z3) * kFix_0_541196100;
        const std::int64_t tmp2e = z1 - z3 * kFix_1_847759065;
        const std::int64_t tmp3e = z1 + z2 * kFix_0_765366865;
        const std::int64_t tmp0e = (w[0] + w[4]) * (std::int64_t{1} << kConstBits);
        const std::int64_t tmp1e = (w[0] - w[4]) * (std::int64_t{1} << kConstBits);
        const std::int64_t tmp10 = tmp0e + tmp3e, tmp13 = tmp0e - tmp3e;
        const std::int64_t tmp11 = tmp1e + tmp2e, tmp12 = tmp1e - tmp2e;

        std::int64_t tmp0 = w[7], tmp1 = w[5], tmp2 = w[3], tmp3 = w[1];
        z1 = tmp0 + tmp3;
        z2 = tmp1 + tmp2;
        z3 = tmp0 + tmp2;
        std::int64_t z4 = tmp1 + tmp3;
        const std::int64_t z5 = (z3 + z4) * kFix_1_175875602;
        tmp0 *= kFix_0_298631336;
        tmp1 *= kFix_2_053119869;
        tmp2 *= kFix_3_072711026;
        tmp3 *= kFix_1_501321110;
        z1 *= -kFix_0_899976223;
        z2 *= -kFix_2_562915447;
        z3 = z3 * -kFix_1_961570560 + z5;
        z4 = z4 * -kFix_0_390180644 + z5;
        tmp0 += z1 + z3;
        tmp1 += z2 + z4;
        tmp2 += z2 + z3;
        tmp3 += z1 + z4;

        constexpr int s = kConstBits + kPass1Bits + 3;
        o[0] = idct_range_limit(descale(tmp10 + tmp3, s));
        o[7] = idct_range_limit(descale(tmp10 - tmp3, s));
        o[1] = idct_range_limit(descale(tmp11 + tmp2, s));
        o[6] = idct_range_limit(descale(tmp11 - tmp2, s));
        o[2] = idct_range_limit(descale(tmp12 + tmp1, s));
        o[5] = idct_range_limit(descale(tmp12 - tmp1, s));
        o[3] = idct_range_limit(descale(tmp13 + tmp0, s));
        o[4] = idct_range_limit(descale(tmp13 - tmp0, s));
    }
}

// ---------------------------------------------------------------------------
// Color conversion (16 fractional bits)

inline constexpr int kScaleBits = 16;
inline constexpr std::int64_t kOneHalf = std::int64_t{1} << (kScaleBits - 1);
inline constexpr std::int64_t kCbCrOffset = std::int64_t{128} << kScaleBits;

constexpr std::int64_t fix(double x) { return static_cast<std::int64_t>(x * (1 << kScaleBits) + 0.5); }

inline void rgb_to_ycc(int r, int g, int b, std::uint8_t& y, std::uint8_t& cb, std::uint8_t& cr) {
    y = static_cast<std::uint8_t>((fix(0.29900) * r + fix(0.58700) * g + fix(0.11400) * b + kOneHalf) >> kScaleBits);
    cb = static_cast<std::uint8_t>((-fix(0.16874) * r - fix(0.33126) * g + fix(0.5) * b + kCbCrOffset + kOneHalf - 1) >>
                                   kScaleBits);
    cr = static_cast<std::uint8_t>((fix(0.5) * r - fix(0.41869) * g - fix(0.08131) * b + kCbCrOffset + kOneHalf - 1) >>
                                   kScaleBits);
}

inline std::uint8_t clamp_sample(std::int64_t v) { return static_cast<std::uint8_t>(std::clamp<std::int64_t>(v, 0, 255)); }

inline void ycc_to_rgb(int y, int cb, int cr, std::uint8_t* rgb) {
    const std::int64_t x_cr = cr - 128;
    const std::int64_t x_cb = cb - 128;
    const std::int64_t cr_r = (fix(1.40200) * x_cr + kOneHalf) >> kScaleBits;
    const std::int64_t cb_b = (fix(1.77200) * x_cb + kOneHalf) >> kScaleBits;
    const std::int64_t g_off = (-fix(0.71414) * x_cr + (-fix(0.34414) * x_cb + kOneHalf)) >> kScaleBits;
    rgb[0] = clamp_sample(y + cr_r);
    rgb[1] = clamp_sample(y + g_off);
    rgb[2] = clamp_sample(y + cb_b);
}

// ---------------------------------------------------------------------------
// Entropy coding

struct HuffmanEncoder {
    std::array<std::uint16_t, 256> code{};
    std::array<std::uint8_t, 256> size{};

    explicit HuffmanEncoder(const HuffmanSpec& spec) {
        std::uint32_t c = 0;
        std::size_t k = 0;
        for (int len = 1; len <= 16; ++len) {
            for (int i = 0; i < spec.bits[static_cast<std::size_t>(len - 1)]; ++i) {
                const auto sym = spec.values.at(k++);
                code[sym] = static_cast<std::uint16_t>(c++);
                size[sym] = static_cast<std::uint8_t>(len);
            }
            c <<= 1;
        }
    }
};

class BitWriter {
public:
    explicit BitWriter(std::vector<std::uint8_t>& out) : out_(out) {}

    void put(std::uint32_t bits, int count) {
        for (int i = count - 1; i >= 0; --i) {
            acc_ = static_cast<std::uint8_t>((acc_ << 1) | ((bits >> i) & 1u));
            if (++nbits_ == 8) emit();
        }
    }

    void flush() {
        while (nbits_ != 0) put(1, 1);
    }

private:
    void emit() {
        out_.push_back(acc_);
        if (acc_ == 0xFF) out_.push_back(0x00);
        acc_ = 0;
        nbits_ = 0;
    }

    std::vector<std::uint8_t>& out_;
    std::uint8_t acc_ = 0;
    int nbits_ = 0;
};

inline int bit_length(int v) {
    int n = 0;
    while (v) {
        ++n;
        v >>= 1;
    }
    return n;
}

inline void encode_block(BitWriter& bw, const std::int16_t* coef, int& last_dc, const HuffmanEncoder& dc,
                         const HuffmanEncoder& ac) {
    int diff = coef[0] - last_dc;
    last_dc = coef[0];
    int mag = diff < 0 ? -diff : diff;
    int nb = bit_length(mag);
    if (nb > 11) throw Error("DC difference out of baseline range");
    bw.put(dc.code[static_cast<std::size_t>(nb)], dc.size[static_cast<std::size_t>(nb)]);
    if (nb) bw.put(static_cast<std::uint32_t>(diff < 0 ? diff - 1 : diff) & ((1u << nb) - 1), nb);

    int run = 0;
    for (int k = 1; k < 64; ++k) {
        const int v = coef[kZigzag[static_cast<std::size_t>(k)]];
        if (v == 0) {
            ++run;
            continue;
        }
        while (run > 15) {
            bw.put(ac.code[0xF0], ac.size[0xF0]);
            run -= 16;
        }
        mag = v < 0 ? -v : v;
        nb = bit_length(mag);
        if (nb > 10) throw Error("AC coefficient out of baseline range");
        const auto sym = static_cast<std::size_t>((run << 4) + nb);
        bw.put(ac.code[sym], ac.size[sym]);
        bw.put(static_cast<std::uint32_t>(v < 0 ? v - 1 : v) & ((1u << nb) - 1), nb);
        run = 0;
    }
    if (run > 0) bw.put(ac.code[0x00], ac.size[0x00]);
}

inline void put_u16(std::vector<std::uint8_t>& out, unsigned v) {
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
}

inline void put_marker(std::vector<std::uint8_t>& out, std::uint8_t m) {
    out.push_back(0xFF);
    out.push_back(m);
}

inline int ceil_div(int a, int b) { return (a + b - 1) / b; }

} // namespace jpeg_detail

/// Annex K table scaled to `quality` with the IJG linear rule, clamped to
/// [1, 255] (baseline). Natural order.
inline std::array<std::uint16_t, 64> scaled_quant_table(int quality, bool chroma) {
    if (quality < 1 || quality > 100) throw ConfigError("JPEG quality must be in [1, 100]");
    const int scale = quality < 50 ? 5000 / quality : 200 - quality * 2;
    const auto& base = chroma ? jpeg_detail::kChromaQuant : jpeg_detail::kLumaQuant;
    std::array<std::uint16_t, 64> table{};
    for (std::size_t i = 0; i < 64; ++i) {
        const long v = (static_cast<long>(base[i]) * scale + 50L) / 100L;
        table[i] = static_cast<std::uint16_t>(std::clamp(v, 1L, 255L));
    }
    return table;
}

/// Encode an RGB image as a baseline JFIF stream with the typical Huffman tables.
inline std::vector<std::uint8_t> encode_jpeg(const ImageBuffer& img, const JpegOptions& opt = {}) {
    using namespace jpeg_detail;
    require_valid(img);
    if (opt.quality < 1 || opt.quality > 100) throw ConfigError("JPEG quality must be in [1, 100]");
    if (img.width > 65535 || img.height > 65535) throw DimensionError("image too large for baseline JPEG");

    const int W = img.width, H = img.height;
    const bool sub = opt.subsampling == ChromaSubsampling::yuv420;
    const int max_h = sub ? 2 : 1, max_v = sub ? 2 : 1;

    // Full-resolution YCbCr planes.
    std::array<std::vector<std::uint8_t>, 3> full;
    for (auto& p : full) p.resize(static_cast<std::size_t>(W) * static_cast<std::size_t>(H));
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const auto i = static_cast<std::size_t>(y) * static_cast<std::size_t>(W) + static_cast<std::size_t>(x);
            rgb_to_ycc(img.at(x, y, 0), img.at(x, y, 1), img.at(x, y, 2), full[0][i], full[1][i], full[2][i]);
        }
    }
    auto full_at = [&](int c, int x, int y) -> int {
        x = std::min(x, W - 1);
        y = std::min(y, H - 1);
        return full[static_cast<std::size_t>(c)][static_cast<std::size_t>(y) * static_cast<std::size_t>(W) +
                                                 static_cast<std::size_t>(x)];
    };

    struct Comp {
        int h, v, tq;
        int wib, hib;
        std::vector<std::int16_t> coef;  // wib*hib blocks, natural order
    };
    std::array<Comp, 3> comps;
    const std::array<std::array<std::uint16_t, 64>, 2> qt = {scaled_quant_table(opt.quality, false),
                                                             scaled_quant_table(opt.quality, true)};

    for (int c = 0; c < 3; ++c) {
        Comp& cp = comps[static_cast<std::size_t>(c)];
        cp.h = c == 0 ? max_h : 1;
        cp.v = c == 0 ? max_v : 1;
        cp.tq = c == 0 ? 0 : 1;
        cp.wib = ceil_div(W * cp.h, max_h * kBlock);
        cp.hib = ceil_div(H * cp.v, max_v * kBlock);
        const int pw = cp.wib * kBlock, ph = cp.hib * kBlock;

        // Component sample plane padded to whole blocks by edge replication.
        std::vector<std::uint8_t> plane(static_cast<std::size_t>(pw) * static_cast<std::size_t>(ph));
        const bool halved = cp.h != max_h;
        const int ds_h = ceil_div(H * cp.v, max_v);
        for (int y = 0; y < ph; ++y) {
            for (int x = 0; x < pw; ++x) {
                int s;
                if (!halved) {
                    s = full_at(c, x, y);
                } else {
                    const int r = std::min(y, ds_h - 1);
                    const int bias = (x & 1) ? 2 : 1;
                    s = (full_at(c, 2 * x, 2 * r) + full_at(c, 2 * x + 1, 2 * r) + full_at(c, 2 * x, 2 * r + 1) +
                         full_at(c, 2 * x + 1, 2 * r + 1) + bias) >>
                        2;
                }
                plane[static_cast<std::size_t>(y) * static_cast<std::size_t>(pw) + static_cast<std::size_t>(x)] =
                    static_cast<std::uint8_t>(s);
            }
        }

        const auto& q = qt[static_cast<std::size_t>(cp.tq)];
        cp.coef.assign(static_cast<std::size_t>(cp.wib) * static_cast<std::size_t>(cp.hib) * 64, 0);
        std::array<std::int32_t, 64> blk{};
        for (int by = 0; by < cp.hib; ++by) {
            for (int bx = 0; bx < cp.wib; ++bx) {
                for (int r = 0; r < 8; ++r)
                    for (int k = 0; k < 8; ++k)
                        blk[static_cast<std::size_t>(r * 8 + k)] =
                            plane[static_cast<std::size_t>(by * 8 + r) * static_cast<std::size_t>(pw) +
                                  static_cast<std::size_t>(bx * 8 + k)] -
                            128;
                forward_dct(blk);
                std::int16_t* out =
                    cp.coef.data() + (static_cast<std::size_t>(by) * static_cast<std::size_t>(cp.wib) +
                                      static_cast<std::size_t>(bx)) * 64;
                for (std::size_t i = 0; i < 64; ++i) {
                    const int qval = q[i] << 3;
                    int t = blk[i];
                    if (t < 0) {
                        t = -t;
                        t += qval >> 1;
                        t = t >= qval ? t / qval : 0;
                        t = -t;
                    } else {
                        t += qval >> 1;
                        t = t >= qval ? t / qval : 0;
                    }
                    out[i] = static_cast<std::int16_t>(t);
                }
            }
        }
    }

    std::vector<std::uint8_t> out;
    out.reserve(static_cast<std::size_t>(W) * static_cast<std::size_t>(H));
    put_marker(out, 0xD8);

    // JFIF APP0
    put_marker(out, 0xE0);
    put_u16(out, 16);
    for (char ch : std::string("JFIF")) out.push_back(static_cast<std::uint8_t>(ch));
    out.insert(out.end(), {0x00, 0x01, 0x01, 0x00, 0x00, 0x01, 0x00, 0x01, 0x00, 0x00});

    for (int t = 0; t < 2; ++t) {
        put_marker(out, 0xDB);
        put_u16(out, 2 + 65);
        out.push_back(static_cast<std::uint8_t>(t));
        for (int k = 0; k < 64; ++k)
            out.push_back(static_cast<std::uint8_t>(qt[static_cast<std::size_t>(t)][static_cast<std::size_t>(kZigzag[static_cast<std::size_t>(k)])]));
    }

    put_marker(out, 0xC0);
    put_u16(out, 8 + 3 * 3);
    out.push_back(8);
    put_u16(out, static_cast<unsigned>(H));
    put_u16(out, static_cast<unsigned>(W));
    out.push_back(3);
    for (int c = 0; c < 3; ++c) {
        const Comp& cp = comps[static_cast<std::size_t>(c)];
        out.push_back(static_cast<std::uint8_t>(c + 1));
        out.push_back(static_cast<std::uint8_t>((cp.h << 4) | cp.v));
        out.push_back(static_cast<std::uint8_t>(cp.tq));
    }

    const std::array<std::pair<int, const HuffmanSpec*>, 4> tables = {
        std::pair{0x00, &dc_luma_spec()}, std::pair{0x10, &ac_luma_spec()}, std::pair{0x01, &dc_chroma_spec()},
        std::pair{0x11, &ac_chroma_spec()}};
    for (const auto& [cls, spec] : tables) {
        put_marker(out, 0xC4);
        put_u16(out, static_cast<unsigned>(2 + 17 + spec->values.size()));
        out.push_back(static_cast<std::uint8_t>(cls));
        out.insert(out.end(), spec->bits.begin(), spec->bits.end());
        out.insert(out.end(), spec->values.begin(), spec->values.end());
    }

    put_marker(out, 0xDA);
    put_u16(out, 6 + 2 * 3);
    out.push_back(3);
    for (int c = 0; c < 3; ++c) {
        out.push_back(static_cast<std::uint8_t>(c + 1));
        out.push_back(c == 0 ? 0x00 : 0x11);
    }
    out.insert(out.end(), {0x00, 0x3F, 0x00});

    const HuffmanEncoder dc_l(dc_luma_spec()), ac_l(ac_luma_spec()), dc_c(dc_chroma_spec()), ac_c(ac_chroma_spec());
    BitWriter bw(out);
    std::array<int, 3> last_dc{0, 0, 0};
    const int mcus_x = ceil_div(W, max_h * kBlock), mcus_y = ceil_div(H, max_v * kBlock);
    std::array<std::int16_t, 64> dummy{};
    for (int my = 0; my < mcus_y; ++my) {
        for (int mx = 0; mx < mcus_x; ++mx) {
            for (int c = 0; c < 3; ++c) {
                const Comp& cp = comps[static_cast<std::size_t>(c)];
                const auto& dc = c == 0 ? dc_l : dc_c;
                const auto& ac = c == 0 ? ac_l : ac_c;
                // Blocks outside the component are coded as flat blocks that
                // repeat the preceding DC; decoders discard them.
                std::vector<int> mcu_dc(static_cast<std::size_t>(cp.h * cp.v), 0);
                for (int j = 0; j < cp.v; ++j) {
                    for (int i = 0; i < cp.h; ++i) {
                        const int bx = mx * cp.h + i, by = my * cp.v + j;
                        const std::size_t slot = static_cast<std::size_t>(j * cp.h + i);
                        const std::int16_t* blk;
                        if (bx < cp.wib && by < cp.hib) {
                            blk = cp.coef.data() + (static_cast<std::size_t>(by) * static_cast<std::size_t>(cp.wib) +
                                                    static_cast<std::size_t>(bx)) * 64;
                        } else {
                            const bool bottom = by >= cp.hib;
                            const int src = bottom ? (j - 1) * cp.h + (cp.h - 1) : j * cp.h + i - 1;
                            dummy[0] = static_cast<std::int16_t>(src >= 0 ? mcu_dc[static_cast<std::size_t>(src)] : 0);
                            blk = dummy.data();
                        }
                        mcu_dc[slot] = blk[0];
                        encode_block(bw, blk, last_dc[static_cast<std::size_t>(c)], dc, ac);
                    }
                }
            }
        }
    }
    bw.flush();
    put_marker(out, 0xD9);
    return out;
}

namespace jpeg_detail {

struct HuffmanDecoder {
    std::array<std::int32_t, 18> maxcode{};
    std::array<std::int32_t, 17> valptr{};
    std::array<std::int32_t, 17> mincode{};
    std::vector<std::uint8_t> values;
    bool defined = false;

    void build(const std::array<std::uint8_t, 16>& bits, std::vector<std::uint8_t> vals) {
        values = std::move(vals);
        std::int32_t code = 0;
        std::int32_t k = 0;
        for (int len = 1; len <= 16; ++len) {
            const int n = bits[static_cast<std::size_t>(len - 1)];
            if (n == 0) {
                maxcode[static_cast<std::size_t>(len)] = -1;
            } else {
                valptr[static_cast<std::size_t>(len)] = k;
                mincode[static_cast<std::size_t>(len)] = code;
                code += n;
                k += n;
                maxcode[static_cast<std::size_t>(len)] = code - 1;
            }
            code <<= 1;
        }
        maxcode[17] = 0x7FFFFFFF;
        defined = true;
    }
};

class BitReader {
public:
    BitReader(std::span<const std::uint8_t> data, std::size_t pos) : data_(data), pos_(pos) {}

    int bit() {
        if (nbits_ == 0) fill();
        --nbits_;
        return (acc_ >> nbits_) & 1;
    }

    int bits(int n) {
        int v = 0;
        for (int i = 0; i < n; ++i) v = (v << 1) | bit();
        return v;
    }

    /// Byte-align and consume an RSTn marker if one is next.
    void restart() {
        nbits_ = 0;
        hit_marker_ = false;
        while (pos_ + 1 < data_.size()) {
            if (data_[pos_] == 0xFF && data_[pos_ + 1] >= 0xD0 && data_[pos_ + 1] <= 0xD7) {
                pos_ += 2;
                return;
            }
            if (data_[pos_] == 0xFF && data_[pos_ + 1] != 0x00 && data_[pos_ + 1] != 0xFF) return;
            ++pos_;
        }
    }

    std::size_t position() const { return pos_; }

private:
    void fill() {
        std::uint8_t b = 0;
        if (!hit_marker_ && pos_ < data_.size()) {
            b = data_[pos_];
            if (b == 0xFF) {
                std::size_t p = pos_ + 1;
                while (p < data_.size() && data_[p] == 0xFF) ++p;
                if (p < data_.size() && data_[p] == 0x00) {
                    pos_ = p + 1;
                } else {
                    hit_marker_ = true;  // leave the marker for the parser, feed zeros
                    b = 0;
                }
            } else {
                ++pos_;
            }
        }
        acc_ = b;
        nbits_ = 8;
    }

    std::span<const std::uint8_t> data_;
    std::size_t pos_;
    int acc_ = 0;
    int nbits_ = 0;
    bool hit_marker_ = false;
};

inline int decode_symbol(BitReader& br, const HuffmanDecoder& t) {
    std::int32_t code = br.bit();
    int len = 1;
    while (len <= 16 && code > t.maxcode[static_cast<std::size_t>(len)]) {
        code = (code << 1) | br.bit();
        ++len;
    }
    if (len > 16) throw IntegrityError("corrupt JPEG: bad Huffman code");
    const auto idx = static_cast<std::size_t>(t.valptr[static_cast<std::size_t>(len)] + code -
                                              t.mincode[static_cast<std::size_t>(len)]);
    if (idx >= t.values.size()) throw IntegrityError("corrupt JPEG: Huffman index out of range");
    return t.values[idx];
}

inline int extend(int v, int s) { return v < (1 << (s - 1)) ? v - (1 << s) + 1 : v; }

struct FrameComponent {
    int id = 0, h = 1, v = 1, tq = 0;
    int td = 0, ta = 0;
    int wib = 0, hib = 0;           // blocks holding image samples
    int blocks_w = 0, blocks_h = 0; // blocks covered by interleaved MCUs
    int ds_w = 0, ds_h = 0;         // downsampled sample extents
    std::vector<std::int16_t> coef;
    int pred = 0;
};

/// Upsample one decoded component plane (stride pw) to the full W x H grid.
inline std::vector<std::uint8_t> upsample(const std::vector<std::uint8_t>& plane, int pw, const FrameComponent& c,
                                          int max_h, int max_v, int W, int H) {
    const int hr = max_h / c.h, vr = max_v / c.v;
    auto in = [&](int x, int y) -> int {
        y = std::clamp(y, 0, c.ds_h - 1);
        return plane[static_cast<std::size_t>(y) * static_cast<std::size_t>(pw) + static_cast<std::size_t>(x)];
    };
    const int ow = c.ds_w * hr;
    const int oh = c.ds_h * vr;
    std::vector<std::uint8_t> out(static_cast<std::size_t>(ow) * static_cast<std::size_t>(oh));
    auto put = [&](int x, int y, int v) {
        out[static_cast<std::size_t>(y) * static_cast<std::size_t>(ow) + static_cast<std::size_t>(x)] =
            static_cast<std::uint8_t>(v);
    };
    const int n = c.ds_w;
    const bool fancy_ok = n > 2;

    if (hr == 1 && vr == 1) {
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) put(x, y, in(x, y));
    } else if (hr == 2 && vr == 2 && fancy_ok) {
        std::vector<int> colsum(static_cast<std::size_t>(n));
        for (int r = 0; r < c.ds_h; ++r) {
            for (int v = 0; v < 2; ++v) {
                const int far = v == 0 ? r - 1 : r + 1;
                for (int j = 0; j < n; ++j) colsum[static_cast<std::size_t>(j)] = in(j, r) * 3 + in(j, far);
                const int oy = 2 * r + v;
                for (int j = 0; j < n; ++j) {
                    const int cs = colsum[static_cast<std::size_t>(j)];
                    const int left = j == 0 ? (cs * 4 + 8) >> 4 : (cs * 3 + colsum[static_cast<std::size_t>(j - 1)] + 8) >> 4;
                    const int right =
                        j == n - 1 ? (cs * 4 + 7) >> 4 : (cs * 3 + colsum[static_cast<std::size_t>(j + 1)] + 7) >> 4;
                    put(2 * j, oy, left);
                    put(2 * j + 1, oy, right);
                }
            }
        }
    } else if (hr == 2 && vr == 1 && fancy_ok) {
        for (int y = 0; y < oh; ++y) {
            for (int j = 0; j < n; ++j) {
                const int cur = in(j, y);
                const int left = j == 0 ? cur : (cur * 3 + in(j - 1, y) + 1) >> 2;
                const int right = j == n - 1 ? cur : (cur * 3 + in(j + 1, y) + 2) >> 2;
                put(2 * j, y, left);
                put(2 * j + 1, y, right);
            }
        }
    } else if (hr == 1 && vr == 2) {
        for (int r = 0; r < c.ds_h; ++r) {
            for (int v = 0; v < 2; ++v) {
                const int far = v == 0 ? r - 1 : r + 1;
                const int bias = v == 0 ? 1 : 2;
                for (int x = 0; x < n; ++x) put(x, 2 * r + v, (in(x, r) * 3 + in(x, far) + bias) >> 2);
            }
        }
    } else {
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) put(x, y, in(x / hr, y / vr));
    }

    // Crop / pad to the output grid.
    std::vector<std::uint8_t> full(static_cast<std::size_t>(W) * static_cast<std::size_t>(H));
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            full[static_cast<std::size_t>(y) * static_cast<std::size_t>(W) + static_cast<std::size_t>(x)] =
                out[static_cast<std::size_t>(std::min(y, oh - 1)) * static_cast<std::size_t>(ow) +
                    static_cast<std::size_t>(std::min(x, ow - 1))];
    return full;
}

} // namespace jpeg_detail

/// Decode a baseline or extended-sequential Huffman JPEG to RGB.
/// Progressive, arithmetic-coded, lossless and 12-bit streams are rejected.
inline ImageBuffer decode_jpeg(std::span<const std::uint8_t> data) {
    using namespace jpeg_detail;
    auto need = [&](std::size_t pos, std::size_t n) {
        if (pos + n > data.size()) throw IntegrityError("corrupt JPEG: truncated segment");
    };
    auto u16 = [&](std::size_t pos) {
        need(pos, 2);
        return static_cast<int>((data[pos] << 8) | data[pos + 1]);
    };

    if (data.size() < 4 || data[0] != 0xFF || data[1] != 0xD8) throw IntegrityError("not a JPEG stream (missing SOI)");

    std::array<std::array<std::uint16_t, 64>, 4> qt{};
    std::array<bool, 4> qt_defined{};
    std::array<HuffmanDecoder, 4> dc_tables, ac_tables;
    std::vector<FrameComponent> comps;
    int W = 0, H = 0, max_h = 1, max_v = 1;
    int restart_interval = 0;
    bool frame_seen = false, any_scan = false;
    int adobe_transform = -1;

    std::size_t pos = 2;
    for (;;) {
        // Skip to the next marker.
        while (pos < data.size() && data[pos] != 0xFF) ++pos;
        while (pos < data.size() && data[pos] == 0xFF) ++pos;
        if (pos >= data.size()) break;
        const std::uint8_t marker = data[pos++];
        if (marker == 0xD9) break;
        if (marker == 0x01 || (marker >= 0xD0 && marker <= 0xD7)) continue;

        const int len = u16(pos);
        if (len < 2) throw IntegrityError("corrupt JPEG: bad segment length");
        need(pos, static_cast<std::size_t>(len));
        const std::size_t seg = pos + 2;
        const std::size_t seg_end = pos + static_cast<std::size_t>(len);

        switch (marker) {
        case 0xDB: {
            std::size_t p = seg;
            while (p < seg_end) {
                const int pq = data[p] >> 4, tq = data[p] & 15;
                ++p;
                if (tq > 3) throw IntegrityError("corrupt JPEG: quantization table id");
                for (int k = 0; k < 64; ++k) {
                    int v;
                    if (pq) {
                        v = u16(p);
                        p += 2;
                    } else {
                        need(p, 1);
                        v = data[p++];
                    }
                    qt[static_cast<std::size_t>(tq)][static_cast<std::size_t>(kZigzag[static_cast<std::size_t>(k)])] =
                        static_cast<std::uint16_t>(v);
                }
                qt_defined[static_cast<std::size_t>(tq)] = true;
            }
            break;
        }
        case 0xC4: {
            std::size_t p = seg;
            while (p < seg_end) {
                need(p, 17);
                const int tc = data[p] >> 4, th = data[p] & 15;
                if (th > 3 || tc > 1) throw IntegrityError("corrupt JPEG: Huffman table id");
                std::array<std::uint8_t, 16> bits{};
                std::size_t total = 0;
                for (std::size_t i = 0; i < 16; ++i) {
                    bits[i] = data[p + 1 + i];
                    total += bits[i];
                }
                p += 17;
                if (total > 256) throw IntegrityError("corrupt JPEG: Huffman table too large");
                need(p, total);
                std::vector<std::uint8_t> vals(data.begin() + static_cast<std::ptrdiff_t>(p),
                                               data.begin() + static_cast<std::ptrdiff_t>(p + total));
                p += total;
                (tc == 0 ? dc_tables : ac_tables)[static_cast<std::size_t>(th)].build(bits, std::move(vals));
            }
            break;
        }
        case 0xDD:
            restart_interval = u16(seg);
            break;
        case 0xEE:
            if (len >= 14 && std::equal(data.begin() + static_cast<std::ptrdiff_t>(seg),
                                        data.begin() + static_cast<std::ptrdiff_t>(seg + 5), "Adobe"))
                adobe_transform = data[seg + 11];
            break;
        case 0xC0:
        case 0xC1: {
            if (frame_seen) throw IntegrityError("corrupt JPEG: multiple frames");
            frame_seen = true;
            need(seg, 6);
            if (data[seg] != 8) throw IoError("unsupported JPEG sample precision");
            H = u16(seg + 1);
            W = u16(seg + 3);
            const int nc = data[seg + 5];
            if (W == 0 || H == 0) throw IoError("unsupported JPEG: zero or deferred dimensions");
            if (nc != 1 && nc != 3) throw IoError("unsupported JPEG component count");
            need(seg + 6, static_cast<std::size_t>(nc) * 3);
            for (int i = 0; i < nc; ++i) {
                FrameComponent c;
                c.id = data[seg + 6 + static_cast<std::size_t>(i) * 3];
                c.h = data[seg + 7 + static_cast<std::size_t>(i) * 3] >> 4;
                c.v = data[seg + 7 + static_cast<std::size_t>(i) * 3] & 15;
                c.tq = data[seg + 8 + static_cast<std::size_t>(i) * 3];
                if (c.h < 1 || c.h > 4 || c.v < 1 || c.v > 4 || c.tq > 3)
                    throw IntegrityError("corrupt JPEG: component parameters");
                max_h = std::max(max_h, c.h);
                max_v = std::max(max_v, c.v);
                comps.push_back(std::move(c));
            }
            const int mcus_x = ceil_div(W, max_h * kBlock), mcus_y = ceil_div(H, max_v * kBlock);
            for (auto& c : comps) {
                if (max_h % c.h || max_v % c.v) throw IoError("unsupported JPEG: fractional sampling ratio");
                c.ds_w = ceil_div(W * c.h, max_h);
                c.ds_h = ceil_div(H * c.v, max_v);
                c.wib = ceil_div(c.ds_w, kBlock);
                c.hib = ceil_div(c.ds_h, kBlock);
                c.blocks_w = mcus_x * c.h;
                c.blocks_h = mcus_y * c.v;
                c.coef.assign(static_cast<std::size_t>(c.blocks_w) * static_cast<std::size_t>(c.blocks_h) * 64, 0);
            }
            break;
        }
        case 0xC2:
        case 0xC3:
        case 0xC5:
        case 0xC6:
        case 0xC7:
        case 0xC9:
        case 0xCA:
        case 0xCB:
        case 0xCD:
        case 0xCE:
        case 0xCF:
            throw IoError("unsupported JPEG process (only baseline/extended sequential Huffman)");
        case 0xDA: {
            if (!frame_seen) throw IntegrityError("corrupt JPEG: scan before frame");
            const int ns = data[seg];
            need(seg + 1, static_cast<std::size_t>(ns) * 2 + 3);
            std::vector<FrameComponent*> scan;
            for (int i = 0; i < ns; ++i) {
                const int cid = data[seg + 1 + static_cast<std::size_t>(i) * 2];
                const int tt = data[seg + 2 + static_cast<std::size_t>(i) * 2];
                auto it = std::find_if(comps.begin(), comps.end(), [&](const FrameComponent& c) { return c.id == cid; });
                if (it == comps.end()) throw IntegrityError("corrupt JPEG: scan references unknown component");
                it->td = tt >> 4;
                it->ta = tt & 15;
                if (it->td > 3 || it->ta > 3 || !dc_tables[static_cast<std::size_t>(it->td)].defined ||
                    !ac_tables[static_cast<std::size_t>(it->ta)].defined)
                    throw IntegrityError("corrupt JPEG: scan uses undefined Huffman table");
                it->pred = 0;
                scan.push_back(&*it);
            }
            BitReader br(data, seg_end);
            auto decode_one = [&](FrameComponent& c, int bx, int by) {
                std::int16_t* blk =
                    c.coef.data() +
                    (static_cast<std::size_t>(by) * static_cast<std::size_t>(c.blocks_w) + static_cast<std::size_t>(bx)) * 64;
                const int t = decode_symbol(br, dc_tables[static_cast<std::size_t>(c.td)]);
                const int diff = t ? extend(br.bits(t), t) : 0;
                c.pred += diff;
                blk[0] = static_cast<std::int16_t>(c.pred);
                for (int k = 1; k < 64;) {
                    const int rs = decode_symbol(br, ac_tables[static_cast<std::size_t>(c.ta)]);
                    const int r = rs >> 4, s = rs & 15;
                    if (s) {
                        k += r;
                        if (k > 63) throw IntegrityError("corrupt JPEG: coefficient index overflow");
                        blk[kZigzag[static_cast<std::size_t>(k)]] = static_cast<std::int16_t>(extend(br.bits(s), s));
                        ++k;
                    } else {
                        if (r != 15) break;
                        k += 16;
                    }
                }
            };
            int until_restart = restart_interval;
            auto maybe_restart = [&]() {
                if (restart_interval == 0) return;
                if (until_restart == 0) {
                    br.restart();
                    for (auto* c : scan) c->pred = 0;
                    until_restart = restart_interval;
                }
                --until_restart;
            };
            if (ns == 1) {
                FrameComponent& c = *scan[0];
                for (int by = 0; by < c.hib; ++by)
                    for (int bx = 0; bx < c.wib; ++bx) {
                        maybe_restart();
                        decode_one(c, bx, by);
                    }
            } else {
                const int mcus_x = ceil_div(W, max_h * kBlock), mcus_y = ceil_div(H, max_v * kBlock);
                for (int my = 0; my < mcus_y; ++my)
                    for (int mx = 0; mx < mcus_x; ++mx) {
                        maybe_restart();
                        for (auto* c : scan)
                            for (int j = 0; j < c->v; ++j)
                                for (int i = 0; i < c->h; ++i) decode_one(*c, mx * c->h + i, my * c->v + j);
                    }
            }
            any_scan = true;
            pos = br.position();
            continue;
        }
        default:
            break;
        }
        pos = seg_end;
    }

    if (!frame_seen || !any_scan) throw IntegrityError("corrupt JPEG: no frame or scan");

    std::vector<std::vector<std::uint8_t>> planes;
    for (const auto& c : comps) {
        if (!qt_defined[static_cast<std::size_t>(c.tq)]) throw IntegrityError("corrupt JPEG: undefined quantization table");
        const int pw = c.wib * kBlock, ph = c.hib * kBlock;
        std::vector<std::uint8_t> plane(static_cast<std::size_t>(pw) * static_cast<std::size_t>(ph));
        for (int by = 0; by < c.hib; ++by)
            for (int bx = 0; bx < c.wib; ++bx)
                inverse_dct(c.coef.data() + (static_cast<std::size_t>(by) * static_cast<std::size_t>(c.blocks_w) +
                                             static_cast<std::size_t>(bx)) * 64,
                            qt[static_cast<std::size_t>(c.tq)],
                            plane.data() + static_cast<std::size_t>(by * 8) * static_cast<std::size_t>(pw) +
                                static_cast<std::size_t>(bx * 8),
                            static_cast<std::size_t>(pw));
        planes.push_back(upsample(plane, pw, c, max_h, max_v, W, H));
    }

    ImageBuffer img(W, H);
    for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
            const auto i = static_cast<std::size_t>(y) * static_cast<std::size_t>(W) + static_cast<std::size_t>(x);
            std::uint8_t* px = &img.at(x, y, 0);
            if (planes.size() == 1) {
                px[0] = px[1] = px[2] = planes[0][i];
            } else if (adobe_transform == 0) {
                px[0] = planes[0][i];
                px[1] = planes[1][i];
                px[2] = planes[2][i];
            } else {
                ycc_to_rgb(planes[0][i], planes[1][i], planes[2][i], px);
            }
        }
    }
    return img;
}

/// Encode at `quality` and decode again.
inline ImageBuffer jpeg_roundtrip(const ImageBuffer& img, int quality,
                                  ChromaSubsampling subsampling = ChromaSubsampling::yuv420) {
    const auto bytes = encode_jpeg(img, JpegOptions{quality, subsampling});
    return decode_jpeg(bytes);
}

} // namespace forgelens
