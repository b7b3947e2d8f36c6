#pragma once

// Confusion counts, accuracy and per-epoch history export.
// Positive class is fake (label 1).

#include <charconv>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <system_error>
#include <utility>
#include <vector>

#include "json.hpp"

#include "forgelens/core/error.hpp"
#include "forgelens/core/hash.hpp"
#include "forgelens/dataset.hpp"
#include "forgelens/image/io.hpp"

namespace forgelens {

struct ConfusionCounts {
    std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;

    std::uint64_t total() const { return tp + tn + fp + fn; }
    std::uint64_t correct() const { return tp + tn; }
    bool operator==(const ConfusionCounts&) const = default;

    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        tn += o.tn;
        fp += o.fp;
        fn += o.fn;
        return *this;
    }
};

inline ConfusionCounts confusion(const std::vector<int>& predictions, const std::vector<int>& labels) {
    if (predictions.size() != labels.size())
        throw ConfigError("confusion: " + std::to_string(predictions.size()) + " predictions vs " +
                          std::to_string(labels.size()) + " labels");
    if (predictions.empty()) throw ConfigError("confusion: no samples");
    ConfusionCounts c;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int p = predictions[i], l = labels[i];
        if ((p != 0 && p != 1) || (l != 0 && l != 1)) throw ConfigError("confusion: values must be 0 or 1");
        if (p == 1 && l == 1) ++c.tp;
        else if (p == 0 && l == 0) ++c.tn;
        else if (p == 1) ++c.fp;
        else ++c.fn;
    }
    return c;
}

/// (TP + TN) / (TP + TN + FP + FN).
inline double accuracy(const ConfusionCounts& c) {
    if (c.total() == 0) throw ConfigError("accuracy of zero samples");
    return static_cast<double>(c.correct()) / static_cast<double>(c.total());
}

struct MetricsRow {
    std::size_t epoch = 0;
    Split split = Split::train;
    double mean_loss = 0.0;
    double accuracy = 0.0;

    bool operator==(const MetricsRow&) const = default;
};

class MetricsHistory {
public:
    std::string run_id;
    std::string config_hash;

    /// Rows of one split must arrive with strictly increasing epochs.
    void append(const MetricsRow& row) {
        if (!(row.accuracy >= 0.0 && row.accuracy <= 1.0)) throw ConfigError("metrics row accuracy outside [0, 1]");
        if (!(row.mean_loss >= 0.0)) throw ConfigError("metrics row loss must be non-negative");
        for (auto it = rows_.rbegin(); it != rows_.rend(); ++it)
            if (it->split == row.split) {
                if (row.epoch <= it->epoch)
                    throw ConfigError("metrics epochs must increase within split " + to_string(row.split));
                break;
            }
        rows_.push_back(row);
    }

    const std::vector<MetricsRow>& rows() const { return rows_; }
    bool empty() const { return rows_.empty(); }
    bool operator==(const MetricsHistory&) const = default;

private:
    std::vector<MetricsRow> rows_;
};

struct BestEntry {
    std::size_t epoch = 0;
    double accuracy = 0.0;
    double mean_loss = 0.0;
};

struct BestOf {
    std::optional<BestEntry> train, test;

    const BestEntry& at(Split s) const {
        const auto& v = s == Split::train ? train : test;
        if (!v) throw ConfigError("history has no " + to_string(s) + " rows");
        return *v;
    }
};

/// Per-split maximum accuracy, taken independently; ties go to the earliest epoch.
inline BestOf best_of(const MetricsHistory& h) {
    if (h.empty()) throw ConfigError("best_of: empty history");
    BestOf b;
    for (const auto& r : h.rows()) {
        auto& slot = r.split == Split::train ? b.train : b.test;
        if (!slot || r.accuracy > slot->accuracy || (r.accuracy == slot->accuracy && r.epoch < slot->epoch))
            slot = BestEntry{r.epoch, r.accuracy, r.mean_loss};
    }
    return b;
}

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw IoError("not a number: '" + s + "'");
    return v;
}

inline constexpr const char* kHistoryCsvName = "history.csv";
inline constexpr const char* kSummaryJsonName = "summary.json";

inline std::string history_to_csv(const MetricsHistory& h) {
    std::string out = "epoch,split,mean_loss,accuracy\r\n";
    for (const auto& r : h.rows())
        out += std::to_string(r.epoch) + "," + to_string(r.split) + "," + format_double(r.mean_loss) + "," +
               format_double(r.accuracy) + "\r\n";
    return out;
}

inline MetricsHistory history_from_csv(const std::string& text) {
    MetricsHistory h;
    std::istringstream in(text);
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (header) {
            if (line != "epoch,split,mean_loss,accuracy") throw IoError("unexpected history header: " + line);
            header = false;
            continue;
        }
        std::vector<std::string> f;
        std::stringstream ss(line);
        for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
        if (f.size() != 4) throw IoError("history row needs 4 fields: " + line);
        h.append({static_cast<std::size_t>(std::stoull(f[0])), parse_split(f[1]), parse_double(f[2]), parse_double(f[3])});
    }
    return h;
}

inline nlohmann::json history_summary(const MetricsHistory& h) {
    const BestOf b = best_of(h);
    auto entry = [](const std::optional<BestEntry>& e) -> nlohmann::json {
        if (!e) return nullptr;
        return {{"epoch", e->epoch}, {"accuracy", e->accuracy}, {"mean_loss", e->mean_loss}};
    };
    std::size_t last_epoch = 0;
    for (const auto& r : h.rows()) last_epoch = std::max(last_epoch, r.epoch);
    return {{"run_id", h.run_id},
            {"config_hash", h.config_hash},
            {"positive_class", "fake"},
            {"best_policy", "per-split maximum accuracy taken independently; ties resolve to the earliest epoch"},
            {"best_train", entry(b.train)},
            {"best_test", entry(b.test)},
            {"epochs", last_epoch},
            {"rows", h.rows().size()}};
}

/// Writes dir/history.csv and dir/summary.json.
inline void export_history(const MetricsHistory& h, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
    const std::string csv = history_to_csv(h);
    const std::string js = history_summary(h).dump(2) + "\n";
    write_file_bytes(dir / kHistoryCsvName, {csv.begin(), csv.end()});
    write_file_bytes(dir / kSummaryJsonName, {js.begin(), js.end()});
}

/// Hex FNV-1a of the canonical (sorted-key, compact) JSON text.
inline std::string config_hash(const nlohmann::json& cfg) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(cfg.dump())));
    return buf;
}

} // namespace forgelens
