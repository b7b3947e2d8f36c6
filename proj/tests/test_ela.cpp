#include <gtest/gtest.h>

#include <cmath>

#include "forgelens/dataset.hpp"
#include "forgelens/ela.hpp"
#include "jpeg_oracle.hpp"
#include "support.hpp"

namespace {

using namespace forgelens;
using fl_test::TempDir;
namespace fs = std::filesystem;

ImageBuffer random_image(int w, int h, std::uint64_t seed) {
    Philox rng(seed);
    ImageBuffer img(w, h);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(rng.below(256));
    return img;
}

ImageBuffer scene(int size, std::uint64_t seed) {
    Philox rng(seed);
    return fixture_detail::smooth_scene(rng, size, 4.0, 6);
}

fl_oracle::Raster to_raster(const ImageBuffer& img) { return {img.width, img.height, img.pixels}; }

ElaConfig config(int q, ChromaSubsampling s = ChromaSubsampling::yuv420) {
    ElaConfig c;
    c.quality = q;
    c.subsampling = s;
    return c;
}

TEST(ElaOracle, RandomImageMatchesLibjpeg) {
    const auto img = random_image(16, 16, 1);
    const auto ours = ela_transform(img, config(90)).residual;
    const auto ref = fl_oracle::ela(to_raster(img), 90);
    EXPECT_EQ(ours.pixels, ref.rgb);
}

class ElaOracleSweep : public ::testing::TestWithParam<std::tuple<int, bool>> {};

TEST_P(ElaOracleSweep, MatchesLibjpegOnOddSizes) {
    const auto [q, yuv444] = GetParam();
    const auto sub = yuv444 ? ChromaSubsampling::yuv444 : ChromaSubsampling::yuv420;
    for (auto [w, h] : {std::pair{37, 23}, std::pair{64, 64}, std::pair{1, 1}, std::pair{17, 9}}) {
        const auto img = w == 64 ? scene(64, static_cast<std::uint64_t>(q)) : random_image(w, h, static_cast<std::uint64_t>(w * h + q));
        EXPECT_EQ(ela_transform(img, config(q, sub)).residual.pixels, fl_oracle::ela(to_raster(img), q, yuv444).rgb)
            << w << "x" << h << " q=" << q << " 444=" << yuv444;
    }
}

INSTANTIATE_TEST_SUITE_P(Qualities, ElaOracleSweep,
                         ::testing::Combine(::testing::Values(1, 25, 50, 70, 90, 95, 100), ::testing::Bool()));

TEST(ElaOracle, EncodedBytesDecodeIdenticallyInLibjpeg) {
    const auto img = scene(48, 3);
    const auto bytes = encode_jpeg(img, JpegOptions{85, ChromaSubsampling::yuv420});
    EXPECT_EQ(decode_jpeg(bytes).pixels, fl_oracle::jpeg_decode(bytes).rgb);
    const auto theirs = fl_oracle::jpeg_encode(to_raster(img), 85, false);
    EXPECT_EQ(decode_jpeg(theirs).pixels, fl_oracle::jpeg_decode(theirs).rgb);
}

TEST(ElaTransform, ConstantGrayBlockRoundTripsExactly) {
    for (int gray : {0, 77, 128, 200, 255}) {
        ImageBuffer img(8, 8, static_cast<std::uint8_t>(gray));
        const auto r = ela_transform(img, config(90)).residual;
        for (auto p : r.pixels) EXPECT_EQ(p, 0) << "gray " << gray;
    }
    ImageBuffer big(40, 24, 128);
    for (auto p : ela_transform(big, config(50)).residual.pixels) EXPECT_EQ(p, 0);
}

TEST(ElaTransform, ResidualIsAbsoluteDifferenceOfRoundTrip) {
    const auto img = scene(32, 4);
    const auto re = jpeg_roundtrip(img, 90);
    const auto r = ela_transform(img).residual;
    ASSERT_EQ(r.width, 32);
    ASSERT_EQ(r.height, 32);
    std::size_t nonzero = 0;
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        EXPECT_EQ(r.pixels[i], std::abs(int(img.pixels[i]) - int(re.pixels[i])));
        nonzero += r.pixels[i] != 0;
    }
    EXPECT_GT(nonzero, 0u);
}

TEST(ElaTransform, DefaultsAreQuality90AndUnitGain) {
    const ElaConfig c;
    EXPECT_EQ(c.quality, 90);
    EXPECT_EQ(c.amplification, 1.0);
    EXPECT_EQ(c.subsampling, ChromaSubsampling::yuv420);
}

TEST(ElaTransform, RejectsQualityOutsideRange) {
    ImageBuffer img(8, 8, 10);
    EXPECT_THROW(ela_transform(img, config(101)), ConfigError);
    EXPECT_THROW(ela_transform(img, config(0)), ConfigError);
    ElaConfig c;
    c.amplification = 0.5;
    EXPECT_THROW(ela_transform(img, c), ConfigError);
}

TEST(ElaTransform, RejectsMalformedBuffers) {
    ImageBuffer img;
    EXPECT_THROW(ela_transform(img), DimensionError);
    ImageBuffer bad(4, 4);
    bad.pixels.pop_back();
    EXPECT_THROW(ela_transform(bad), DimensionError);
}

TEST(ElaTransform, SpliceHasHigherResidualInside) {
    // Base image saved once at q95, splice region taken from a q50 decode
    // of another scene.
    ImageBuffer img = jpeg_roundtrip(scene(64, 10), 95);
    const ImageBuffer donor = jpeg_roundtrip(scene(64, 11), 50);
    const int x0 = 19, y0 = 23, side = 20;
    for (int y = y0; y < y0 + side; ++y)
        for (int x = x0; x < x0 + side; ++x)
            for (int c = 0; c < 3; ++c) img.at(x, y, c) = donor.at(x, y, c);
    const auto r = ela_transform(img).residual;
    double in = 0, out = 0;
    std::size_t n_in = 0, n_out = 0;
    for (int y = 0; y < 64; ++y)
        for (int x = 0; x < 64; ++x)
            for (int c = 0; c < 3; ++c) {
                const bool inside = x >= x0 && x < x0 + side && y >= y0 && y < y0 + side;
                (inside ? in : out) += r.at(x, y, c);
                ++(inside ? n_in : n_out);
            }
    EXPECT_GT(in / n_in, out / n_out);
}

TEST(ElaTransform, McuAlignedCropShiftsResidual) {
    // A crop on the MCU grid sees the same blocks, so its residual is the
    // shifted residual of the full image. With 4:2:0 the first row and
    // column of the crop take a different upsampling edge rule.
    const auto full = scene(64, 20);
    for (auto [sub, mcu, edge] : {std::tuple{ChromaSubsampling::yuv444, 8, 0}, std::tuple{ChromaSubsampling::yuv420, 16, 1}}) {
        for (int k : {1, 2}) {
            const int off = k * mcu;
            ImageBuffer crop(64 - off, 64 - off);
            for (int y = 0; y < crop.height; ++y)
                for (int x = 0; x < crop.width; ++x)
                    for (int c = 0; c < 3; ++c) crop.at(x, y, c) = full.at(x + off, y + off, c);
            const auto a = ela_transform(full, config(90, sub)).residual;
            const auto b = ela_transform(crop, config(90, sub)).residual;
            for (int y = edge; y < crop.height; ++y)
                for (int x = edge; x < crop.width; ++x)
                    for (int c = 0; c < 3; ++c) ASSERT_EQ(b.at(x, y, c), a.at(x + off, y + off, c)) << x << "," << y;
        }
    }
}

TEST(ElaDisplay, AmplifiesAndSaturates) {
    ElaImage e{ImageBuffer(2, 1)};
    e.residual.pixels = {0, 10, 100, 1, 2, 255};
    const auto d = amplify_for_display(e, 3.0);
    EXPECT_EQ(d.pixels, (std::vector<std::uint8_t>{0, 30, 255, 3, 6, 255}));
    EXPECT_EQ(amplify_for_display(e, 1.0).pixels, e.residual.pixels);
    EXPECT_THROW(amplify_for_display(e, 0.9), ConfigError);
}

// ---------------------------------------------------------------------------
// Batch preprocessing

void build_tree(const fs::path& root) {
    fs::create_directories(root / "a" / "deep");
    fs::create_directories(root / "b");
    write_png(root / "a" / "one.png", scene(24, 1));
    write_png(root / "a" / "deep" / "two.png", scene(40, 2));
    write_file_bytes(root / "b" / "three.jpg", encode_jpeg(scene(32, 3), JpegOptions{80, ChromaSubsampling::yuv420}));
    write_file_bytes(root / "b" / "four.JPEG", encode_jpeg(scene(16, 4), JpegOptions{60, ChromaSubsampling::yuv444}));
    write_png(root / "five.png", random_image(9, 7, 5));
    write_file_bytes(root / "notes.txt", {'h', 'i'});
}

std::vector<std::pair<std::string, std::vector<std::uint8_t>>> snapshot(const fs::path& root) {
    std::vector<std::pair<std::string, std::vector<std::uint8_t>>> out;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) out.emplace_back(fs::relative(e.path(), root).generic_string(), fl_test::file_bytes(e.path()));
    std::sort(out.begin(), out.end());
    return out;
}

TEST(BatchPreprocess, EmptyDirectoryIsAnError) {
    TempDir src("ela_empty"), dst("ela_empty_out");
    EXPECT_THROW(batch_preprocess(src.path(), dst.path()), IoError);
    EXPECT_THROW(batch_preprocess(src / "missing", dst.path()), IoError);
}

TEST(BatchPreprocess, MirrorsTreeWithResiduals) {
    TempDir src("ela_src"), dst("ela_dst");
    build_tree(src.path());
    const auto report = batch_preprocess(src.path(), dst.path());
    EXPECT_EQ(report.processed, 5u);
    EXPECT_TRUE(report.failed.empty());
    for (const char* rel : {"a/one.png", "a/deep/two.png", "b/three.jpg", "b/four.JPEG", "five.png"}) {
        fs::path out = dst.path() / rel;
        out.replace_extension(".png");
        ASSERT_TRUE(fs::exists(out)) << out;
        const auto expect = ela_transform(read_image(src.path() / rel)).residual;
        EXPECT_EQ(read_png(out), expect) << rel;
    }
    EXPECT_FALSE(fs::exists(dst / "notes.txt"));
    const auto j = nlohmann::json::parse(std::string(
        [&] { auto b = fl_test::file_bytes(dst / kElaReportName); return std::string(b.begin(), b.end()); }()));
    EXPECT_EQ(j, report.to_json());
    EXPECT_EQ(j.at("quality"), 90);
}

TEST(BatchPreprocess, RerunAndThreadsAreByteIdentical) {
    TempDir src("ela_src2"), a("ela_a"), b("ela_b"), c("ela_c");
    build_tree(src.path());
    batch_preprocess(src.path(), a.path());
    batch_preprocess(src.path(), b.path());
    batch_preprocess(src.path(), c.path(), {}, 4);
    EXPECT_EQ(snapshot(a.path()), snapshot(b.path()));
    EXPECT_EQ(snapshot(a.path()), snapshot(c.path()));
    batch_preprocess(src.path(), a.path());
    EXPECT_EQ(snapshot(a.path()), snapshot(b.path()));
}

TEST(BatchPreprocess, CorruptFilesAreReportedAndSkipped) {
    TempDir src("ela_src3"), dst("ela_dst3");
    build_tree(src.path());
    write_file_bytes(src / "b" / "broken.jpg", {0xFF, 0xD8, 0xFF, 0x00, 0x12});
    write_file_bytes(src / "garbage.png", {'n', 'o', 'p', 'e'});
    const auto report = batch_preprocess(src.path(), dst.path(), {}, 2);
    EXPECT_EQ(report.processed, 5u);
    EXPECT_EQ(report.failed, (std::vector<std::string>{"b/broken.jpg", "garbage.png"}));
    EXPECT_FALSE(fs::exists(dst / "garbage.png"));
    EXPECT_EQ(report.processed + report.failed.size(), list_images(src.path()).size());
}

TEST(BatchPreprocess, ReportCarriesSettings) {
    TempDir src("ela_src4"), dst("ela_dst4");
    build_tree(src.path());
    const auto report = batch_preprocess(src.path(), dst.path(), config(70, ChromaSubsampling::yuv444));
    EXPECT_EQ(report.quality, 70);
    EXPECT_EQ(report.subsampling, "4:4:4");
    EXPECT_THROW(batch_preprocess(src.path(), dst.path(), config(101)), ConfigError);
}

TEST(Subsampling, ParseAndPrint) {
    EXPECT_EQ(parse_subsampling("4:2:0"), ChromaSubsampling::yuv420);
    EXPECT_EQ(parse_subsampling("444"), ChromaSubsampling::yuv444);
    EXPECT_EQ(to_string(ChromaSubsampling::yuv444), "4:4:4");
    EXPECT_THROW(parse_subsampling("4:2:2"), ConfigError);
}

} // namespace
