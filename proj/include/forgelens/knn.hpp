#pragma once

// Exhaustive k-nearest-neighbour classification over feature rows.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <numeric>
#include <string>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "forgelens/core/error.hpp"
#include "forgelens/image/io.hpp"

namespace forgelens {

enum class KnnMetric { cosine, euclidean, manhattan, minkowski, chebyshev };
enum class KnnWeighting { uniform, distance };

inline constexpr std::array<KnnMetric, 5> kAllMetrics{KnnMetric::cosine, KnnMetric::euclidean, KnnMetric::manhattan,
                                                      KnnMetric::minkowski, KnnMetric::chebyshev};
inline constexpr std::array<KnnWeighting, 2> kAllWeightings{KnnWeighting::uniform, KnnWeighting::distance};

inline std::string to_string(KnnMetric m) {
    switch (m) {
    case KnnMetric::cosine: return "cosine";
    case KnnMetric::euclidean: return "euclidean";
    case KnnMetric::manhattan: return "manhattan";
    case KnnMetric::minkowski: return "minkowski";
    case KnnMetric::chebyshev: return "chebyshev";
    }
    return "?";
}

inline std::string to_string(KnnWeighting w) { return w == KnnWeighting::uniform ? "uniform" : "distance"; }

inline KnnMetric parse_metric(const std::string& s) {
    for (auto m : kAllMetrics)
        if (to_string(m) == s) return m;
    throw ConfigError("unknown distance metric '" + s + "'");
}

inline KnnWeighting parse_weighting(const std::string& s) {
    if (s == "uniform") return KnnWeighting::uniform;
    if (s == "distance") return KnnWeighting::distance;
    throw ConfigError("unknown weighting '" + s + "'");
}

struct KnnConfig {
    std::size_t k = 5;
    KnnMetric metric = KnnMetric::euclidean;
    double p = 3.0;
    KnnWeighting weighting = KnnWeighting::uniform;
    double epsilon = 1e-8;

    void validate() const {
        if (k == 0) throw ConfigError("knn: k must be >= 1");
        if (!(p > 0.0)) throw ConfigError("knn: minkowski p must be positive");
        if (!(epsilon > 0.0)) throw ConfigError("knn: epsilon must be positive");
    }
};

/// Distance between equal-length vectors, accumulated in double.
/// cosine = 1 - a.b / (|a| |b|); raises when either vector is zero.
template <class A, class B>
double distance(const A* a, const B* b, std::size_t d, KnnMetric metric, double p = 3.0) {
    double acc = 0.0;
    switch (metric) {
    case KnnMetric::euclidean:
        for (std::size_t i = 0; i < d; ++i) {
            const double t = static_cast<double>(a[i]) - static_cast<double>(b[i]);
            acc += t * t;
        }
        return std::sqrt(acc);
    case KnnMetric::manhattan:
        for (std::size_t i = 0; i < d; ++i) acc += std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
        return acc;
    case KnnMetric::chebyshev:
        for (std::size_t i = 0; i < d; ++i) acc = std::max(acc, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
        return acc;
    case KnnMetric::minkowski:
        for (std::size_t i = 0; i < d; ++i) acc += std::pow(std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])), p);
        return std::pow(acc, 1.0 / p);
    case KnnMetric::cosine: {
        double na = 0.0, nb = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
            na += static_cast<double>(a[i]) * static_cast<double>(a[i]);
            nb += static_cast<double>(b[i]) * static_cast<double>(b[i]);
        }
        if (na == 0.0 || nb == 0.0) throw ConfigError("cosine distance is undefined for a zero vector");
        return std::max(0.0, 1.0 - acc / (std::sqrt(na) * std::sqrt(nb)));
    }
    }
    return 0.0;
}

inline double distance(const std::vector<double>& a, const std::vector<double>& b, KnnMetric metric, double p = 3.0) {
    if (a.size() != b.size()) throw DimensionError("distance: vector lengths differ");
    return distance(a.data(), b.data(), a.size(), metric, p);
}

/// Rows stored verbatim as 32-bit floats, row-major [n, d].
struct FeatureStore {
    std::size_t n = 0, d = 0;
    std::vector<float> matrix;
    std::vector<std::uint8_t> labels;
    std::string extractor_id;

    const float* row(std::size_t i) const { return matrix.data() + i * d; }

    std::array<std::size_t, 2> label_counts() const {
        std::array<std::size_t, 2> c{0, 0};
        for (auto l : labels) ++c[l];
        return c;
    }

    bool operator==(const FeatureStore&) const = default;
};

inline FeatureStore fit(std::vector<float> features, std::size_t d, const std::vector<int>& labels, std::string extractor_id) {
    if (d == 0 || labels.empty() || features.size() != labels.size() * d)
        throw DimensionError("knn fit: features must be [N, D] with N = labels and N, D >= 1");
    FeatureStore s;
    s.n = labels.size();
    s.d = d;
    for (float v : features)
        if (!std::isfinite(v)) throw NumericError("knn fit: non-finite feature value");
    for (int l : labels) {
        if (l != 0 && l != 1) throw ConfigError("knn fit: labels must be 0 or 1");
        s.labels.push_back(static_cast<std::uint8_t>(l));
    }
    s.matrix = std::move(features);
    s.extractor_id = std::move(extractor_id);
    return s;
}

struct KnnPrediction {
    int label = 0;
    std::array<double, 2> scores{0.0, 0.0};  // normalized to sum 1
};

/// Exact k nearest rows; neighbour ties resolve by row order, class ties to 0.
template <class Q>
KnnPrediction predict(const FeatureStore& store, const Q* query, const KnnConfig& cfg) {
    cfg.validate();
    if (cfg.k > store.n)
        throw ConfigError("knn: k = " + std::to_string(cfg.k) + " exceeds the store size " + std::to_string(store.n));
    std::vector<std::pair<double, std::size_t>> dist(store.n);
    for (std::size_t i = 0; i < store.n; ++i) dist[i] = {distance(store.row(i), query, store.d, cfg.metric, cfg.p), i};
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(cfg.k), dist.end());
    KnnPrediction out;
    for (std::size_t j = 0; j < cfg.k; ++j) {
        const double w = cfg.weighting == KnnWeighting::uniform ? 1.0 : 1.0 / (dist[j].first + cfg.epsilon);
        out.scores[store.labels[dist[j].second]] += w;
    }
    const double total = out.scores[0] + out.scores[1];
    out.scores[0] /= total;
    out.scores[1] /= total;
    out.label = out.scores[1] > out.scores[0] ? 1 : 0;
    return out;
}

inline KnnPrediction predict(const FeatureStore& store, const std::vector<float>& query, const KnnConfig& cfg) {
    if (query.size() != store.d) throw DimensionError("knn: query dimension differs from the store");
    return predict(store, query.data(), cfg);
}

/// Accuracy of `cfg` predicting every row of `queries` against `store`.
inline double knn_accuracy(const FeatureStore& store, const FeatureStore& queries, const KnnConfig& cfg) {
    if (queries.n == 0) throw ConfigError("knn: empty query store");
    if (queries.d != store.d) throw DimensionError("knn: stores have different feature dimensions");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < queries.n; ++i)
        if (predict(store, queries.row(i), cfg).label == queries.labels[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(queries.n);
}

struct GridRow {
    KnnMetric metric;
    KnnWeighting weighting;
    std::size_t k;
    double accuracy;
};

/// Every (metric, weighting, k) combination scored on `val`; rows sorted by
/// accuracy descending, then by (metric name, weighting name, k) ascending.
inline std::vector<GridRow> grid_search(const FeatureStore& train, const FeatureStore& val, const std::vector<KnnMetric>& metrics,
                                        const std::vector<KnnWeighting>& weightings, const std::vector<std::size_t>& ks,
                                        double p = 3.0, double epsilon = 1e-8) {
    if (metrics.empty() || weightings.empty() || ks.empty()) throw ConfigError("grid_search: empty grid");
    if (val.n == 0) throw ConfigError("grid_search: empty validation store");
    for (auto k : ks)
        if (k == 0 || k > train.n)
            throw ConfigError("grid_search: k = " + std::to_string(k) + " must be in [1, " + std::to_string(train.n) +
                              "] (training store size)");
    std::vector<GridRow> rows;
    for (auto m : metrics)
        for (auto w : weightings)
            for (auto k : ks) rows.push_back({m, w, k, knn_accuracy(train, val, KnnConfig{k, m, p, w, epsilon})});
    std::sort(rows.begin(), rows.end(), [](const GridRow& a, const GridRow& b) {
        if (a.accuracy != b.accuracy) return a.accuracy > b.accuracy;
        return std::make_tuple(to_string(a.metric), to_string(a.weighting), a.k) <
               std::make_tuple(to_string(b.metric), to_string(b.weighting), b.k);
    });
    return rows;
}

inline std::string grid_to_csv(const std::vector<GridRow>& rows) {
    std::string out = "rank,metric,weighting,k,accuracy\r\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        char acc[32];
        std::snprintf(acc, sizeof acc, "%.17g", rows[i].accuracy);
        out += std::to_string(i + 1) + "," + to_string(rows[i].metric) + "," + to_string(rows[i].weighting) + "," +
               std::to_string(rows[i].k) + "," + acc + "\r\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Store file: magic "FLKNN001", u32 LE header length, JSON header
// {n, d, extractor_id, label_counts}, n*d f32 LE, n label bytes.

inline constexpr char kKnnMagic[8] = {'F', 'L', 'K', 'N', 'N', '0', '0', '1'};

namespace knn_detail {
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline std::uint32_t get_u32(const std::uint8_t* p) {
    return std::uint32_t{p[0]} | std::uint32_t{p[1]} << 8 | std::uint32_t{p[2]} << 16 | std::uint32_t{p[3]} << 24;
}
} // namespace knn_detail

inline std::vector<std::uint8_t> serialize_store(const FeatureStore& s) {
    const auto counts = s.label_counts();
    const std::string header =
        nlohmann::json{{"n", s.n}, {"d", s.d}, {"extractor_id", s.extractor_id}, {"label_counts", counts}}.dump();
    std::vector<std::uint8_t> out(std::begin(kKnnMagic), std::end(kKnnMagic));
    knn_detail::put_u32(out, static_cast<std::uint32_t>(header.size()));
    out.insert(out.end(), header.begin(), header.end());
    for (float v : s.matrix) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        knn_detail::put_u32(out, bits);
    }
    out.insert(out.end(), s.labels.begin(), s.labels.end());
    return out;
}

inline FeatureStore deserialize_store(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 12 || !std::equal(std::begin(kKnnMagic), std::end(kKnnMagic), bytes.begin()))
        throw IntegrityError("not a feature store (bad magic)");
    const std::size_t hlen = knn_detail::get_u32(bytes.data() + 8);
    if (12 + hlen > bytes.size()) throw IntegrityError("feature store header truncated");
    nlohmann::json h;
    try {
        h = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(hlen));
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("feature store header: ") + e.what());
    }
    FeatureStore s;
    s.n = h.at("n");
    s.d = h.at("d");
    s.extractor_id = h.at("extractor_id");
    const std::size_t off = 12 + hlen;
    if (bytes.size() != off + s.n * s.d * 4 + s.n) throw IntegrityError("feature store payload size mismatch");
    s.matrix.resize(s.n * s.d);
    for (std::size_t i = 0; i < s.matrix.size(); ++i) {
        const std::uint32_t bits = knn_detail::get_u32(bytes.data() + off + 4 * i);
        std::memcpy(&s.matrix[i], &bits, 4);
    }
    s.labels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(off + s.n * s.d * 4), bytes.end());
    for (auto l : s.labels)
        if (l > 1) throw IntegrityError("feature store label out of range");
    if (h.at("label_counts").get<std::array<std::size_t, 2>>() != s.label_counts())
        throw IntegrityError("feature store label counts disagree with header");
    return s;
}

inline void save_store(const FeatureStore& s, const std::filesystem::path& path) { write_file_bytes(path, serialize_store(s)); }
inline FeatureStore load_store(const std::filesystem::path& path) { return deserialize_store(read_file_bytes(path)); }

} // namespace forgelens
