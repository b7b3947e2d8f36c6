#pragma once

// Error level analysis: the per-sample absolute difference between an image
// and its JPEG recompression at a known quality.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "forgelens/core/error.hpp"
#include "forgelens/image/image.hpp"
#include "forgelens/image/io.hpp"
#include "forgelens/image/jpeg.hpp"
#include "forgelens/image/png.hpp"

namespace forgelens {

struct ElaConfig {
    int quality = 90;
    /// Gain used only by amplify_for_display; never applied to residuals.
    double amplification = 1.0;
    ChromaSubsampling subsampling = ChromaSubsampling::yuv420;

    void validate() const {
        if (quality < 1 || quality > 100) throw ConfigError("ELA quality must be in [1, 100], got " + std::to_string(quality));
        if (!(amplification >= 1.0) || !std::isfinite(amplification)) throw ConfigError("ELA amplification must be >= 1");
    }
};

/// Residual |x - recompressed(x)|; same geometry as its source.
struct ElaImage {
    ImageBuffer residual;
};

inline ElaImage ela_transform(const ImageBuffer& img, const ElaConfig& cfg = {}) {
    cfg.validate();
    const ImageBuffer re = jpeg_roundtrip(img, cfg.quality, cfg.subsampling);
    ElaImage out{ImageBuffer(img.width, img.height)};
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        const int d = static_cast<int>(img.pixels[i]) - static_cast<int>(re.pixels[i]);
        out.residual.pixels[i] = static_cast<std::uint8_t>(d < 0 ? -d : d);
    }
    return out;
}

/// Scaled copy for viewing, saturating at 255.
inline ImageBuffer amplify_for_display(const ElaImage& ela, double gain) {
    if (!(gain >= 1.0)) throw ConfigError("display gain must be >= 1");
    ImageBuffer out = ela.residual;
    for (auto& p : out.pixels) p = static_cast<std::uint8_t>(std::min(255.0, std::round(p * gain)));
    return out;
}

struct ElaReport {
    std::size_t processed = 0;
    std::vector<std::string> failed;  // source paths relative to the input root
    int quality = 90;
    std::string subsampling = "4:2:0";

    nlohmann::json to_json() const {
        return {{"processed", processed}, {"failed", failed}, {"quality", quality}, {"subsampling", subsampling}};
    }
};

inline constexpr const char* kElaReportName = "ela_report.json";

/// Sorted relative paths of every .jpg/.jpeg/.png below root.
inline std::vector<std::filesystem::path> list_images(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw IoError("not a directory: '" + root.string() + "'");
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file() && is_image_path(e.path())) files.push_back(fs::relative(e.path(), root));
    }
    std::sort(files.begin(), files.end());
    return files;
}

/// Mirror src_root into dst_root with every image replaced by its lossless
/// PNG residual (extension swapped to .png). Unreadable files are listed in
/// the report; processing continues. The report is also written to
/// dst_root/ela_report.json.
inline ElaReport batch_preprocess(const std::filesystem::path& src_root, const std::filesystem::path& dst_root,
                                  const ElaConfig& cfg = {}, unsigned threads = 1) {
    namespace fs = std::filesystem;
    cfg.validate();
    const auto files = list_images(src_root);
    if (files.empty()) throw IoError("no JPEG/PNG images under '" + src_root.string() + "'");
    fs::create_directories(dst_root);

    std::vector<char> ok(files.size(), 0);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < files.size(); i = next++) {
            try {
                const ImageBuffer img = read_image(src_root / files[i]);
                const ElaImage ela = ela_transform(img, cfg);
                fs::path out = dst_root / files[i];
                out.replace_extension(".png");
                fs::create_directories(out.parent_path());
                write_png(out, ela.residual);
                ok[i] = 1;
            } catch (const std::exception&) {
                ok[i] = 0;
            }
        }
    };
    threads = std::max(1u, threads);
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
    }

    ElaReport report;
    report.quality = cfg.quality;
    report.subsampling = to_string(cfg.subsampling);
    for (std::size_t i = 0; i < files.size(); ++i) {
        if (ok[i])
            ++report.processed;
        else
            report.failed.push_back(files[i].generic_string());
    }
    const std::string text = report.to_json().dump(2) + "\n";
    write_file_bytes(dst_root / kElaReportName, std::vector<std::uint8_t>(text.begin(), text.end()));
    return report;
}

} // namespace forgelens
