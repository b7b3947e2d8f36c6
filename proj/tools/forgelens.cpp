// forgelens: fixture generation, ELA preprocessing, training, evaluation and
// KNN experiments from one binary.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "forgelens/checkpoint.hpp"
#include "forgelens/dataset.hpp"
#include "forgelens/ela.hpp"
#include "forgelens/knn.hpp"
#include "forgelens/metrics.hpp"
#include "forgelens/run.hpp"
#include "forgelens/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace forgelens;

namespace {

constexpr const char* kRunManifestName = "run_manifest.json";

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_text(const fs::path& p, const std::string& text) { write_file_bytes(p, {text.begin(), text.end()}); }

json read_json_file(const fs::path& p) {
    const auto bytes = read_file_bytes(p);
    try {
        return json::parse(bytes.begin(), bytes.end());
    } catch (const json::exception& e) {
        throw ConfigError("cannot parse '" + p.string() + "': " + e.what());
    }
}

/// Records one invocation beside its outputs.
class RunRecord {
public:
    RunRecord(std::string subcommand, fs::path dir) : cmd_(std::move(subcommand)), dir_(std::move(dir)), start_(utc_now()) {
        fs::create_directories(dir_);
    }

    void set_config(json cfg, std::uint64_t seed) {
        config_ = std::move(cfg);
        seed_ = seed;
    }
    void artifact(const fs::path& p) { artifacts_.push_back(fs::relative(p, dir_).generic_string()); }

    void write(unsigned threads) const {
        const json m{{"subcommand", cmd_},
                     {"resolved_config", config_},
                     {"seed", seed_},
                     {"threads", threads},
                     {"started_at", start_},
                     {"finished_at", utc_now()},
                     {"artifacts", artifacts_}};
        write_text(dir_ / kRunManifestName, m.dump(2) + "\n");
    }

private:
    std::string cmd_;
    fs::path dir_;
    std::string start_;
    json config_ = json::object();
    std::uint64_t seed_ = 0;
    std::vector<std::string> artifacts_;
};

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) out.push_back(item);
    return out;
}

// ---------------------------------------------------------------------------

struct FixtureArgs {
    std::string out;
    std::size_t n_per_class = 100;
    std::uint64_t seed = 0;
};

void cmd_fixture(const FixtureArgs& a, unsigned threads) {
    RunRecord rec("fixture", a.out);
    const FixtureOptions opt;
    make_fixture_dataset(a.out, a.n_per_class, a.seed, opt);
    rec.set_config({{"n_per_class", a.n_per_class},
                    {"image_size", opt.image_size},
                    {"base_quality", {opt.base_quality_min, opt.base_quality_max}},
                    {"splice_quality", {opt.splice_quality_min, opt.splice_quality_max}},
                    {"splice_size", {opt.splice_min, opt.splice_max}},
                    {"noise_sigma", opt.noise_sigma},
                    {"shapes", opt.shapes}},
                   a.seed);
    rec.artifact(fs::path(a.out) / "real");
    rec.artifact(fs::path(a.out) / "fake");
    rec.write(threads);
    std::cout << "wrote " << 2 * a.n_per_class << " images to " << a.out << "\n";
}

struct ElaArgs {
    std::string in, out, subsampling = "4:2:0";
    int quality = 90;
};

void cmd_ela(const ElaArgs& a, unsigned threads) {
    ElaConfig cfg;
    cfg.quality = a.quality;
    cfg.subsampling = parse_subsampling(a.subsampling);
    cfg.validate();
    RunRecord rec("ela", a.out);
    const auto report = batch_preprocess(a.in, a.out, cfg, threads);
    rec.set_config({{"in", a.in}, {"quality", cfg.quality}, {"subsampling", to_string(cfg.subsampling)}}, 0);
    rec.artifact(fs::path(a.out) / kElaReportName);
    rec.write(threads);
    std::cout << report.to_json().dump() << "\n";
}

struct TrainArgs {
    std::string config, data, out, resume;
};

void cmd_train(const TrainArgs& a, unsigned threads) {
    const auto cfg = TrainConfig::from_json(read_json_file(a.config));
    const auto manifest = prepare_manifest(a.data, cfg.split_ratio, cfg.seed);
    RunRecord rec("train", a.out);
    rec.set_config(cfg.to_json(), cfg.seed);
    const auto result = run_training<float>(cfg, manifest, a.out, a.resume, [](const MetricsRow& tr, const MetricsRow& te) {
        std::cout << "epoch " << tr.epoch << "  train loss " << format_double(tr.mean_loss) << " acc "
                  << format_double(tr.accuracy) << "  test loss " << format_double(te.mean_loss) << " acc "
                  << format_double(te.accuracy) << std::endl;
    });
    for (const char* name : {kCheckpointName, kHistoryCsvName, kSummaryJsonName, kResolvedConfigName, kDataManifestName})
        rec.artifact(fs::path(a.out) / name);
    rec.write(threads);
}

struct EvalArgs {
    std::string checkpoint, data, split = "test", out;
};

void cmd_eval(const EvalArgs& a, unsigned threads) {
    const Split split = parse_split(a.split);
    auto ck = load_checkpoint<float>(a.checkpoint);
    const TrainConfig cfg = ck.train ? *ck.train : TrainConfig{};
    const auto manifest = prepare_manifest(a.data, cfg.split_ratio, cfg.seed);
    const auto data = load_split<float>(manifest, split, ck.model->image_size(), cfg.normalization);
    const std::size_t epoch = ck.state ? ck.state->epoch : 0;
    const auto r = evaluate(*ck.model, data, cfg.batch_size, split, epoch);
    const json out{{"checkpoint_id", ck.id},
                   {"epoch", epoch},
                   {"split", to_string(split)},
                   {"samples", data.labels.size()},
                   {"mean_loss", r.row.mean_loss},
                   {"accuracy", r.row.accuracy},
                   {"positive_class", "fake"},
                   {"confusion", {{"tp", r.counts.tp}, {"tn", r.counts.tn}, {"fp", r.counts.fp}, {"fn", r.counts.fn}}},
                   {"data_manifest_matches", ck.data_hash.empty() || ck.data_hash == manifest_hash(manifest)}};
    std::cout << out.dump(2) << std::endl;
    if (!a.out.empty()) {
        RunRecord rec("eval", a.out);
        rec.set_config({{"checkpoint", a.checkpoint}, {"data", a.data}, {"split", a.split}}, cfg.seed);
        write_text(fs::path(a.out) / "eval.json", out.dump(2) + "\n");
        rec.artifact(fs::path(a.out) / "eval.json");
        rec.write(threads);
    }
}

struct InitArgs {
    std::string config, out;
};

/// Writes a freshly initialized model as a checkpoint, for use as an
/// untrained feature extractor.
void cmd_init(const InitArgs& a, unsigned threads) {
    const auto cfg = TrainConfig::from_json(read_json_file(a.config));
    const auto model = build_model<float>(cfg.model, cfg.seed);
    RunRecord rec("init", a.out);
    rec.set_config(cfg.to_json(), cfg.seed);
    save_checkpoint<float>(fs::path(a.out) / kCheckpointName, *model, &cfg, nullptr);
    rec.artifact(fs::path(a.out) / kCheckpointName);
    rec.write(threads);
    std::cout << "wrote " << (fs::path(a.out) / kCheckpointName).string() << " (" << model->parameters().count()
              << " parameters)\n";
}

struct KnnArgs {
    std::string checkpoint, data, out, grid = "full", weightings = "uniform,distance", ks = "1,3,5,7,9";
    double p = 3.0;
};

void cmd_knn(const KnnArgs& a, unsigned threads) {
    std::vector<KnnMetric> metrics;
    if (a.grid == "full")
        metrics.assign(kAllMetrics.begin(), kAllMetrics.end());
    else
        for (const auto& m : split_list(a.grid)) metrics.push_back(parse_metric(m));
    std::vector<KnnWeighting> weightings;
    for (const auto& w : split_list(a.weightings)) weightings.push_back(parse_weighting(w));
    std::vector<std::size_t> ks;
    for (const auto& k : split_list(a.ks)) {
        try {
            ks.push_back(std::stoull(k));
        } catch (const std::exception&) {
            throw ConfigError("bad k value '" + k + "'");
        }
    }

    auto ck = load_checkpoint<float>(a.checkpoint);
    const TrainConfig cfg = ck.train ? *ck.train : TrainConfig{};
    const auto manifest = prepare_manifest(a.data, cfg.split_ratio, cfg.seed);
    const auto train = load_split<float>(manifest, Split::train, ck.model->image_size(), cfg.normalization);
    const auto test = load_split<float>(manifest, Split::test, ck.model->image_size(), cfg.normalization);
    for (auto k : ks)
        if (k == 0 || k > train.labels.size())
            throw ConfigError("k = " + std::to_string(k) + " must be in [1, " + std::to_string(train.labels.size()) +
                              "] (training split size)");
    const std::size_t d = ck.model->feature_dim();
    const auto store = fit(extract_features(*ck.model, train, cfg.batch_size), d, train.labels, ck.id);
    const auto queries = fit(extract_features(*ck.model, test, cfg.batch_size), d, test.labels, ck.id);
    const auto rows = grid_search(store, queries, metrics, weightings, ks, a.p);

    RunRecord rec("knn", a.out);
    rec.set_config({{"extractor_checkpoint", a.checkpoint},
                    {"extractor_id", ck.id},
                    {"metrics", split_list(a.grid)},
                    {"weightings", split_list(a.weightings)},
                    {"k", ks},
                    {"p", a.p},
                    {"validation_split", "test"}},
                   cfg.seed);
    const fs::path out(a.out);
    write_text(out / "knn_grid.csv", grid_to_csv(rows));
    save_store(store, out / "train_store.flknn");
    save_store(queries, out / "test_store.flknn");
    const KnnConfig best{rows[0].k, rows[0].metric, a.p, rows[0].weighting};
    const double train_acc = knn_accuracy(store, store, best);
    const json summary{{"best", {{"metric", to_string(best.metric)}, {"weighting", to_string(best.weighting)}, {"k", best.k}}},
                       {"train_accuracy", train_acc},
                       {"test_accuracy", rows[0].accuracy},
                       {"gap", train_acc - rows[0].accuracy},
                       {"extractor_id", ck.id}};
    write_text(out / "knn_summary.json", summary.dump(2) + "\n");
    for (const char* name : {"knn_grid.csv", "train_store.flknn", "test_store.flknn", "knn_summary.json"})
        rec.artifact(out / name);
    rec.write(threads);
    std::cout << summary.dump() << "\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"forgelens: ELA-based image forgery classification experiments"};
    app.require_subcommand(1);
    unsigned threads = 1;
    app.add_option("--threads", threads, "Worker thread cap")->envname("FORGELENS_THREADS")->check(CLI::Range(1u, 1024u));

    FixtureArgs fx;
    auto* fixture = app.add_subcommand("fixture", "Generate the synthetic real/fake dataset");
    fixture->add_option("--out", fx.out, "Output dataset root")->required();
    fixture->add_option("--n-per-class", fx.n_per_class, "Images per class")->check(CLI::PositiveNumber);
    fixture->add_option("--seed", fx.seed, "Seed");

    ElaArgs ea;
    auto* ela = app.add_subcommand("ela", "Write lossless ELA residuals mirroring a dataset tree");
    ela->add_option("--in", ea.in, "Source dataset root")->required();
    ela->add_option("--out", ea.out, "Residual output root")->required();
    ela->add_option("--quality", ea.quality, "Recompression quality (1-100)");
    ela->add_option("--subsampling", ea.subsampling, "Chroma subsampling: 4:2:0 or 4:4:4");

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "Train a model and export its metric history");
    train->add_option("--config", ta.config, "Train config JSON")->required();
    train->add_option("--data", ta.data, "Dataset root (real/ and fake/)")->required();
    train->add_option("--out", ta.out, "Run directory")->required();
    train->add_option("--resume", ta.resume, "Checkpoint to continue from");

    EvalArgs va;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on one split");
    eval->add_option("--checkpoint", va.checkpoint, "Checkpoint file")->required();
    eval->add_option("--data", va.data, "Dataset root")->required();
    eval->add_option("--split", va.split, "train or test");
    eval->add_option("--out", va.out, "Optional run directory for eval.json");

    InitArgs ia;
    auto* init = app.add_subcommand("init", "Write an initialized, untrained model checkpoint");
    init->add_option("--config", ia.config, "Train config JSON (model, seed, normalization)")->required();
    init->add_option("--out", ia.out, "Output directory")->required();

    KnnArgs ka;
    auto* knn = app.add_subcommand("knn", "KNN grid search over extracted features");
    knn->add_option("--extractor-checkpoint", ka.checkpoint, "Feature extractor checkpoint")->required();
    knn->add_option("--data", ka.data, "Dataset root")->required();
    knn->add_option("--out", ka.out, "Run directory")->required();
    knn->add_option("--grid", ka.grid, "'full' or a comma list of metrics");
    knn->add_option("--weightings", ka.weightings, "Comma list of weightings");
    knn->add_option("--k", ka.ks, "Comma list of neighbour counts");
    knn->add_option("--p", ka.p, "Minkowski exponent");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*fixture) cmd_fixture(fx, threads);
        else if (*ela) cmd_ela(ea, threads);
        else if (*train) cmd_train(ta, threads);
        else if (*eval) cmd_eval(va, threads);
        else if (*init) cmd_init(ia, threads);
        else if (*knn) cmd_knn(ka, threads);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DimensionError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
