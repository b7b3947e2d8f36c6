#pragma once

// Dataset discovery, stratified splitting, batch loading and the synthetic
// fixture generator. Layout: <root>/real/*.{jpg,jpeg,png} and
// <root>/fake/*.{jpg,jpeg,png}; real = 0, fake = 1.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "forgelens/core/error.hpp"
#include "forgelens/core/hash.hpp"
#include "forgelens/core/rng.hpp"
#include "forgelens/image/image.hpp"
#include "forgelens/image/io.hpp"
#include "forgelens/image/jpeg.hpp"
#include "forgelens/image/png.hpp"
#include "forgelens/image/resize.hpp"
#include "forgelens/tensor.hpp"

namespace forgelens {

enum Label : int { kReal = 0, kFake = 1 };
enum class Split { train, test };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    throw ConfigError("unknown split '" + s + "' (expected train or test)");
}

inline const char* label_dir(int label) { return label == kReal ? "real" : "fake"; }

struct ImageRecord {
    std::string path;  // relative to the dataset root, '/'-separated
    int label = kReal;
    Split split = Split::train;

    bool operator==(const ImageRecord&) const = default;
};

struct DatasetManifest {
    std::filesystem::path root;
    std::vector<ImageRecord> records;
    std::uint64_t seed = 0;
    double split_ratio = 0.8;

    std::vector<std::size_t> indices(Split s) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < records.size(); ++i)
            if (records[i].split == s) out.push_back(i);
        return out;
    }
};

/// Sorted listing of <root>/real and <root>/fake. Labels come only from the
/// directory name.
inline std::vector<ImageRecord> scan_dataset(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    std::vector<ImageRecord> out;
    for (int label : {kReal, kFake}) {
        const fs::path dir = root / label_dir(label);
        if (!fs::is_directory(dir)) throw IoError("dataset root '" + root.string() + "' has no " + label_dir(label) + "/ directory");
        for (const auto& e : fs::directory_iterator(dir))
            if (e.is_regular_file() && is_image_path(e.path()))
                out.push_back({(fs::path(label_dir(label)) / e.path().filename()).generic_string(), label, Split::train});
    }
    if (out.empty()) throw IoError("dataset root '" + root.string() + "' contains no images");
    std::sort(out.begin(), out.end(), [](const ImageRecord& a, const ImageRecord& b) { return a.path < b.path; });
    return out;
}

/// Stratified split: within each class, a seeded Fisher-Yates shuffle and the
/// first round(ratio * n_class) records go to train.
inline DatasetManifest split_dataset(std::vector<ImageRecord> records, double ratio, std::uint64_t seed,
                                     std::filesystem::path root = {}) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must be in (0, 1)");
    DatasetManifest m{std::move(root), std::move(records), seed, ratio};
    for (int label : {kReal, kFake}) {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < m.records.size(); ++i)
            if (m.records[i].label == label) idx.push_back(i);
        if (idx.empty()) throw ConfigError(std::string("split: class '") + label_dir(label) + "' has no records");
        Philox rng(derive_seed(seed, "split"), static_cast<std::uint64_t>(label));
        for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
        const auto n_train = static_cast<std::size_t>(std::lround(ratio * static_cast<double>(idx.size())));
        for (std::size_t i = 0; i < idx.size(); ++i) m.records[idx[i]].split = i < n_train ? Split::train : Split::test;
    }
    return m;
}

/// One JSON object per line: {"path", "label", "split"}.
inline std::string manifest_to_jsonl(const DatasetManifest& m) {
    std::string out;
    for (const auto& r : m.records)
        out += nlohmann::json{{"path", r.path}, {"label", r.label}, {"split", to_string(r.split)}}.dump() + "\n";
    return out;
}

inline std::vector<ImageRecord> records_from_jsonl(const std::string& text) {
    std::vector<ImageRecord> out;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            ImageRecord r{j.at("path").get<std::string>(), j.at("label").get<int>(), parse_split(j.at("split").get<std::string>())};
            if (r.label != kReal && r.label != kFake) throw ConfigError("label must be 0 or 1");
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw IoError("manifest line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

struct Normalization {
    std::array<double, 3> mean{0.5, 0.5, 0.5};
    std::array<double, 3> std{0.5, 0.5, 0.5};

    void validate() const {
        for (double s : std)
            if (!(s > 0.0)) throw ConfigError("normalization std must be positive");
    }
};

template <class T>
struct Batch {
    Tensor<T> images;        // [N, 3, S, S]
    std::vector<int> labels;
};

/// Decode, bilinear-resize to S x S, scale to [0, 1], then (v - mean) / std
/// per channel.
template <class T>
Batch<T> load_batch(const DatasetManifest& m, const std::vector<std::size_t>& indices, std::size_t image_size,
                    const Normalization& norm = {}) {
    norm.validate();
    if (indices.empty()) throw ConfigError("load_batch: no indices");
    if (image_size == 0) throw ConfigError("load_batch: image size must be positive");
    const std::size_t plane = image_size * image_size;
    std::vector<T> data(indices.size() * 3 * plane);
    Batch<T> b;
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= m.records.size()) throw ConfigError("load_batch: index out of range");
        const auto& rec = m.records[indices[i]];
        const auto path = m.root / rec.path;
        ImageBuffer img;
        try {
            img = read_image(path);
        } catch (const Error& e) {
            throw IoError("cannot load '" + path.string() + "': " + e.what());
        }
        const auto px = resize_bilinear_planar(img, static_cast<int>(image_size), static_cast<int>(image_size));
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t k = 0; k < plane; ++k) {
                const double v = static_cast<double>(px[c * plane + k]) / 255.0;
                data[(i * 3 + c) * plane + k] = static_cast<T>((v - norm.mean[c]) / norm.std[c]);
            }
        b.labels.push_back(rec.label);
    }
    b.images = Tensor<T>({indices.size(), 3, image_size, image_size}, std::move(data));
    return b;
}

template <class T>
Batch<T> load_split(const DatasetManifest& m, Split s, std::size_t image_size, const Normalization& norm = {}) {
    const auto idx = m.indices(s);
    if (idx.empty()) throw ConfigError("split '" + to_string(s) + "' is empty");
    return load_batch<T>(m, idx, image_size, norm);
}

// ---------------------------------------------------------------------------
// Synthetic fixture

struct FixtureOptions {
    int image_size = 64;
    int base_quality_min = 60;      // every image is a decoded JPEG at a quality
    int base_quality_max = 95;      // drawn from [min, max]
    int splice_quality_min = 40;    // fakes: splice encoded at a quality in
    int splice_quality_max = 70;    // [min, max]
    int splice_min = 12;            // splice side length range in pixels
    int splice_max = 24;
    double noise_sigma = 4.0;
    int shapes = 6;                 // sharp-edged rectangles drawn into every scene
};

namespace fixture_detail {

struct Rect {
    int x0, y0, x1, y1;
    double offset[3];
};

inline ImageBuffer smooth_scene(Philox& rng, int size, double noise, int shapes = 0) {
    ImageBuffer img(size, size);
    double c0[3], gx[3], gy[3];
    for (int c = 0; c < 3; ++c) {
        c0[c] = 60.0 + rng.uniform() * 140.0;
        gx[c] = (rng.uniform() - 0.5) * 80.0;
        gy[c] = (rng.uniform() - 0.5) * 80.0;
    }
    std::vector<Rect> rects(static_cast<std::size_t>(std::max(0, shapes)));
    for (auto& r : rects) {
        r.x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(size)));
        r.y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(size)));
        r.x1 = r.x0 + 4 + static_cast<int>(rng.below(static_cast<std::uint64_t>(size / 2)));
        r.y1 = r.y0 + 4 + static_cast<int>(rng.below(static_cast<std::uint64_t>(size / 2)));
        for (double& o : r.offset) o = (rng.uniform() - 0.5) * 120.0;
    }
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = c0[c] + gx[c] * x / size + gy[c] * y / size + rng.normal() * noise;
                for (const auto& r : rects)
                    if (x >= r.x0 && x < r.x1 && y >= r.y0 && y < r.y1) v += r.offset[c];
                img.pixels[(static_cast<std::size_t>(y) * size + x) * 3 + c] =
                    static_cast<std::uint8_t>(std::clamp<long>(std::lround(v), 0, 255));
            }
    return img;
}

} // namespace fixture_detail

/// Real: a scene (gradient, sharp-edged rectangles, Gaussian noise) decoded
/// from JPEG at a base quality. Fake: a real image whose random rectangle is
/// replaced by the same region of a different scene decoded from JPEG at the
/// splice quality. Files are lossless PNG so the stored samples are exactly
/// those decoded pixels. Image i of a class depends only on (seed, class, i).
inline std::filesystem::path make_fixture_dataset(const std::filesystem::path& out_root, std::size_t n_per_class,
                                                  std::uint64_t seed, const FixtureOptions& opt = {}) {
    namespace fs = std::filesystem;
    if (n_per_class == 0) throw ConfigError("fixture needs at least one image per class");
    if (opt.image_size < opt.splice_max + 1 || opt.splice_min < 1 || opt.splice_min > opt.splice_max)
        throw ConfigError("fixture splice range does not fit the image size");
    if (opt.base_quality_min < 1 || opt.base_quality_min > opt.base_quality_max || opt.base_quality_max > 100 ||
        opt.splice_quality_min < 1 || opt.splice_quality_min > opt.splice_quality_max || opt.splice_quality_max > 100)
        throw ConfigError("fixture quality ranges must lie in [1, 100] with min <= max");
    std::error_code ec;
    for (const char* d : {"real", "fake"}) {
        fs::create_directories(out_root / d, ec);
        if (ec) throw IoError("cannot create '" + (out_root / d).string() + "': " + ec.message());
    }
    const int s = opt.image_size;
    for (int label : {kReal, kFake}) {
        for (std::size_t i = 0; i < n_per_class; ++i) {
            Philox rng(derive_seed(seed, std::string("fixture.") + label_dir(label)), i);
            const int qb = opt.base_quality_min +
                           static_cast<int>(rng.below(static_cast<std::uint64_t>(opt.base_quality_max - opt.base_quality_min + 1)));
            ImageBuffer img = jpeg_roundtrip(fixture_detail::smooth_scene(rng, s, opt.noise_sigma, opt.shapes), qb);
            if (label == kFake) {
                const int span = opt.splice_max - opt.splice_min + 1;
                const int w = opt.splice_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(span)));
                const int h = opt.splice_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(span)));
                const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(s - w)));
                const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(s - h)));
                const int q = opt.splice_quality_min +
                              static_cast<int>(rng.below(static_cast<std::uint64_t>(opt.splice_quality_max - opt.splice_quality_min + 1)));
                const ImageBuffer donor = jpeg_roundtrip(fixture_detail::smooth_scene(rng, s, opt.noise_sigma, opt.shapes), q);
                for (int y = y0; y < y0 + h; ++y)
                    for (int x = x0; x < x0 + w; ++x)
                        for (int c = 0; c < 3; ++c) img.at(x, y, c) = donor.at(x, y, c);
            }
            char name[32];
            std::snprintf(name, sizeof name, "%s_%04zu.png", label_dir(label), i);
            write_png(out_root / label_dir(label) / name, img);
        }
    }
    return out_root;
}

} // namespace forgelens
