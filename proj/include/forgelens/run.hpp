#pragma once

// Whole training runs: data preparation, the epoch loop with per-epoch
// evaluation, checkpointing and metric export.

#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>

#include "json.hpp"

#include "forgelens/checkpoint.hpp"
#include "forgelens/dataset.hpp"
#include "forgelens/metrics.hpp"
#include "forgelens/train.hpp"

namespace forgelens {

inline constexpr const char* kCheckpointName = "checkpoint.flck";
inline constexpr const char* kAbortCheckpointName = "checkpoint_abort.flck";
inline constexpr const char* kResolvedConfigName = "config.json";
inline constexpr const char* kDataManifestName = "data_manifest.jsonl";

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string manifest_hash(const DatasetManifest& m) { return hex64(fnv1a64(manifest_to_jsonl(m))); }

/// Scan `root` and split it with the run's seed and ratio.
inline DatasetManifest prepare_manifest(const std::filesystem::path& root, double ratio, std::uint64_t seed) {
    return split_dataset(scan_dataset(root), ratio, seed, root);
}

/// Hash of the config without "epochs": a run extended by resuming keeps its
/// identity.
inline std::string run_config_hash(const TrainConfig& cfg) {
    auto j = cfg.to_json();
    j.erase("epochs");
    return config_hash(j);
}

struct RunResult {
    MetricsHistory history;
    std::filesystem::path checkpoint;
};

using EpochCallback = std::function<void(const MetricsRow& train, const MetricsRow& test)>;

/// Trains until cfg.epochs epochs are complete. After every epoch the test
/// split is evaluated, and out_dir/checkpoint.flck, history.csv and
/// summary.json are rewritten. With `resume`, the run continues from that
/// checkpoint, which must come from the same config (epochs aside) and data.
/// A non-finite loss writes out_dir/checkpoint_abort.flck holding the state
/// reached by the last completed step, then rethrows.
template <class T = float>
RunResult run_training(const TrainConfig& cfg, const DatasetManifest& manifest, const std::filesystem::path& out_dir,
                       const std::filesystem::path& resume = {}, const EpochCallback& on_epoch = {}) {
    cfg.validate();
    std::filesystem::create_directories(out_dir);
    const std::string data_hash = manifest_hash(manifest);

    std::unique_ptr<Model<T>> model;
    std::unique_ptr<TrainState<T>> state;
    if (!resume.empty()) {
        auto ck = load_checkpoint<T>(resume);
        if (!ck.train || !ck.state) throw ConfigError("resume checkpoint carries no training state");
        if (run_config_hash(*ck.train) != run_config_hash(cfg))
            throw ConfigError("resume checkpoint was written by a different train config");
        if (ck.data_hash != data_hash) throw IntegrityError("resume checkpoint was trained on a different data manifest");
        model = std::move(ck.model);
        state = std::move(ck.state);
    } else {
        model = build_model<T>(cfg.model, cfg.seed);
        state = std::make_unique<TrainState<T>>(cfg.optimizer_config(), model->parameters());
        state->history.config_hash = run_config_hash(cfg);
        state->history.run_id = "run-" + state->history.config_hash;
    }
    if (!model->parameters().buffers().empty() && cfg.batch_size < 2)
        throw ConfigError("batch_size must be >= 2 for models with batch_norm layers");

    const std::string cfg_text = cfg.to_json().dump(2) + "\n";
    write_file_bytes(out_dir / kResolvedConfigName, {cfg_text.begin(), cfg_text.end()});
    const std::string jsonl = manifest_to_jsonl(manifest);
    write_file_bytes(out_dir / kDataManifestName, {jsonl.begin(), jsonl.end()});

    const auto train = load_split<T>(manifest, Split::train, model->image_size(), cfg.normalization);
    const auto test = load_split<T>(manifest, Split::test, model->image_size(), cfg.normalization);

    while (state->epoch < cfg.epochs) {
        MetricsRow train_row;
        try {
            train_row = train_epoch(*model, train, *state, cfg);
        } catch (const NumericError&) {
            save_checkpoint(out_dir / kAbortCheckpointName, *model, &cfg, state.get(), data_hash);
            throw;
        }
        const auto test_row = evaluate(*model, test, cfg.batch_size, Split::test, train_row.epoch).row;
        state->history.append(train_row);
        state->history.append(test_row);
        save_checkpoint(out_dir / kCheckpointName, *model, &cfg, state.get(), data_hash);
        export_history(state->history, out_dir);
        if (on_epoch) on_epoch(train_row, test_row);
    }
    return {state->history, out_dir / kCheckpointName};
}

} // namespace forgelens
