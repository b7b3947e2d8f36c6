#pragma once

// Run configuration, the epoch loop and evaluation.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "forgelens/core/error.hpp"
#include "forgelens/core/hash.hpp"
#include "forgelens/core/rng.hpp"
#include "forgelens/dataset.hpp"
#include "forgelens/metrics.hpp"
#include "forgelens/models.hpp"
#include "forgelens/nn.hpp"
#include "forgelens/ops.hpp"
#include "forgelens/optim.hpp"

namespace forgelens {

struct TrainConfig {
    nlohmann::json model = nlohmann::json{{"arch", "swin"}};
    OptimizerKind optimizer = OptimizerKind::adamw;
    double learning_rate = 1e-4;
    std::size_t batch_size = 32;
    double weight_decay = 0.01;  // resolved: 0 for rmsprop unless given
    std::size_t epochs = 30;
    std::uint64_t seed = 0;
    std::string freeze_policy = "none";
    double split_ratio = 0.8;
    Normalization normalization;
    double rmsprop_alpha = 0.99;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double optimizer_eps = 1e-8;

    void validate() const {
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
        if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
        if (epochs == 0) throw ConfigError("epochs must be >= 1");
        if (optimizer == OptimizerKind::rmsprop && weight_decay != 0.0)
            throw ConfigError("weight_decay applies to adamw only; rmsprop runs use none");
        if (!(split_ratio > 0.0 && split_ratio < 1.0)) throw ConfigError("split_ratio must be in (0, 1)");
        normalization.validate();
        FreezePolicy::parse(freeze_policy);
        optimizer_config().validate();
    }

    OptimizerConfig optimizer_config() const {
        return {optimizer, learning_rate, rmsprop_alpha, adam_beta1, adam_beta2, optimizer_eps, weight_decay};
    }

    nlohmann::json to_json() const {
        return {{"model", model},
                {"optimizer", to_string(optimizer)},
                {"learning_rate", learning_rate},
                {"batch_size", batch_size},
                {"weight_decay", weight_decay},
                {"epochs", epochs},
                {"seed", seed},
                {"freeze_policy", freeze_policy},
                {"split_ratio", split_ratio},
                {"normalization", {{"mean", normalization.mean}, {"std", normalization.std}}},
                {"rmsprop_alpha", rmsprop_alpha},
                {"adam_beta1", adam_beta1},
                {"adam_beta2", adam_beta2},
                {"optimizer_eps", optimizer_eps}};
    }

    /// Unknown keys are rejected so a misspelt field cannot silently fall back
    /// to its default.
    static TrainConfig from_json(const nlohmann::json& j) {
        static const std::set<std::string> known{"model",      "optimizer",     "learning_rate", "batch_size",
                                                 "weight_decay", "epochs",      "seed",          "freeze_policy",
                                                 "split_ratio", "normalization", "rmsprop_alpha", "adam_beta1",
                                                 "adam_beta2", "optimizer_eps"};
        if (!j.is_object()) throw ConfigError("train config must be a JSON object");
        for (const auto& [key, _] : j.items())
            if (!known.count(key)) throw ConfigError("unknown train config key '" + key + "'");
        TrainConfig c;
        try {
            if (j.contains("model")) c.model = j.at("model");
            if (c.model.is_string()) c.model = nlohmann::json{{"arch", c.model}};
            c.model = resolve_model_config(c.model);
            if (j.contains("optimizer")) c.optimizer = parse_optimizer(j.at("optimizer").get<std::string>());
            if (j.contains("learning_rate")) c.learning_rate = j.at("learning_rate");
            if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<std::size_t>();
            c.weight_decay = j.contains("weight_decay") ? j.at("weight_decay").get<double>()
                                                        : (c.optimizer == OptimizerKind::adamw ? 0.01 : 0.0);
            if (j.contains("epochs")) c.epochs = j.at("epochs").get<std::size_t>();
            if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
            if (j.contains("freeze_policy")) c.freeze_policy = j.at("freeze_policy");
            if (j.contains("split_ratio")) c.split_ratio = j.at("split_ratio");
            if (j.contains("normalization")) {
                const auto& n = j.at("normalization");
                if (n.contains("mean")) c.normalization.mean = n.at("mean");
                if (n.contains("std")) c.normalization.std = n.at("std");
            }
            if (j.contains("rmsprop_alpha")) c.rmsprop_alpha = j.at("rmsprop_alpha");
            if (j.contains("adam_beta1")) c.adam_beta1 = j.at("adam_beta1");
            if (j.contains("adam_beta2")) c.adam_beta2 = j.at("adam_beta2");
            if (j.contains("optimizer_eps")) c.optimizer_eps = j.at("optimizer_eps");
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("invalid train config: ") + e.what());
        }
        c.validate();
        return c;
    }
};

/// Everything besides the weights that a resumed run needs.
template <class T>
struct TrainState {
    Optimizer<T> optimizer;
    std::size_t epoch = 0;  // completed epochs
    std::vector<bool> freeze_mask;
    MetricsHistory history;

    TrainState(const OptimizerConfig& cfg, const ParameterSet<T>& ps) : optimizer(cfg, ps) {}
};

/// Argmax over two logits per row; ties predict 0 (real).
template <class T>
std::vector<int> predict_labels(const Tensor<T>& logits) {
    if (logits.rank() != 2 || logits.dim(1) != 2) throw DimensionError("expected [N, 2] logits, got " + shape_str(logits.shape()));
    std::vector<int> out(logits.dim(0));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = logits[2 * i + 1] > logits[2 * i] ? 1 : 0;
    return out;
}

/// Seeded permutation of [0, n) for one epoch.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Philox rng(derive_seed(seed, "shuffle"), epoch);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return order;
}

/// Consecutive batches of `order`; a trailing batch of one joins the batch
/// before it, so batch_norm never sees a single sample.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, std::size_t batch_size) {
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < order.size(); i += batch_size)
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
    if (out.size() > 1 && out.back().size() == 1) {
        out[out.size() - 2].push_back(out.back()[0]);
        out.pop_back();
    }
    return out;
}

/// One pass over `data` (epoch is the number of completed epochs, so the
/// returned row is numbered epoch + 1). Loss and accuracy are those of the
/// forward passes that drove each step.
template <class T>
MetricsRow train_epoch(Model<T>& model, const Batch<T>& data, TrainState<T>& state, const TrainConfig& cfg) {
    if (data.labels.empty()) throw ConfigError("train_epoch: empty training split");
    const auto& ps = model.parameters();
    state.freeze_mask = apply_freeze_policy(ps.groups().size(), FreezePolicy::parse(cfg.freeze_policy), state.epoch);
    set_trainable(ps, state.freeze_mask);
    ps.zero_grad();

    const auto batches = make_batches(epoch_order(data.labels.size(), cfg.seed, state.epoch), cfg.batch_size);
    double loss_sum = 0.0;
    std::vector<int> preds, labels;
    for (std::size_t b = 0; b < batches.size(); ++b) {
        const auto& idx = batches[b];
        std::vector<int> y;
        for (auto i : idx) y.push_back(data.labels[i]);
        Philox drop(derive_seed(cfg.seed, "dropout"), (static_cast<std::uint64_t>(state.epoch) << 32) | b);
        std::vector<std::vector<T>> buffers_before;
        for (const auto& buf : ps.buffers()) buffers_before.emplace_back(buf.tensor.values().begin(), buf.tensor.values().end());
        ModelOutput<T> out;
        double l = 0.0;
        try {
            Tape<T> tape;
            TapeScope<T> scope(tape);
            out = model.forward(index_rows(data.images, idx), ForwardContext{Mode::train, &drop});
            const auto loss = cross_entropy_loss(out.logits, y);
            l = static_cast<double>(loss.item());
            if (!std::isfinite(l))
                throw NumericError("non-finite loss at epoch " + std::to_string(state.epoch + 1) + ", batch " + std::to_string(b));
            if (loss.requires_grad()) tape.backward(loss);
            state.optimizer.step(ps, state.freeze_mask);
        } catch (const NumericError&) {
            // A failed batch leaves the model as the previous batch left it:
            // the optimizer never applies a partial step, and running
            // statistics moved by the forward are put back.
            for (std::size_t i = 0; i < buffers_before.size(); ++i) {
                Tensor<T> t = ps.buffers()[i].tensor;
                std::copy(buffers_before[i].begin(), buffers_before[i].end(), t.mutable_values().begin());
            }
            ps.zero_grad();
            throw;
        }
        ps.zero_grad();
        loss_sum += l * static_cast<double>(idx.size());
        const auto p = predict_labels(out.logits);
        preds.insert(preds.end(), p.begin(), p.end());
        labels.insert(labels.end(), y.begin(), y.end());
    }
    ++state.epoch;
    return {state.epoch, Split::train, loss_sum / static_cast<double>(labels.size()), accuracy(confusion(preds, labels))};
}

struct EvalResult {
    MetricsRow row;
    std::vector<int> predictions;
    ConfusionCounts counts;
};

/// Eval-mode pass without recording; parameters and buffers are untouched.
template <class T>
EvalResult evaluate(Model<T>& model, const Batch<T>& data, std::size_t batch_size, Split split, std::size_t epoch = 0) {
    if (data.labels.empty()) throw ConfigError("evaluate: empty split");
    if (batch_size == 0) throw ConfigError("evaluate: batch_size must be >= 1");
    NoGradScope<T> no_grad;
    EvalResult r;
    double loss_sum = 0.0;
    std::vector<std::size_t> order(data.labels.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + batch_size)));
        std::vector<int> y;
        for (auto i : idx) y.push_back(data.labels[i]);
        const auto out = model.forward(index_rows(data.images, idx), ForwardContext{Mode::eval, nullptr});
        loss_sum += static_cast<double>(cross_entropy_loss(out.logits, y).item()) * static_cast<double>(idx.size());
        const auto p = predict_labels(out.logits);
        r.predictions.insert(r.predictions.end(), p.begin(), p.end());
    }
    r.counts = confusion(r.predictions, data.labels);
    r.row = {epoch, split, loss_sum / static_cast<double>(data.labels.size()), accuracy(r.counts)};
    return r;
}

/// Eval-mode feature rows [N, D] as 32-bit floats (the KNN input).
template <class T>
std::vector<float> extract_features(Model<T>& model, const Batch<T>& data, std::size_t batch_size) {
    NoGradScope<T> no_grad;
    std::vector<float> out;
    for (std::size_t start = 0; start < data.labels.size(); start += batch_size) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(data.labels.size(), start + batch_size); ++i) idx.push_back(i);
        const auto f = model.forward(index_rows(data.images, idx), ForwardContext{Mode::eval, nullptr}).features;
        for (T v : f.values()) out.push_back(static_cast<float>(v));
    }
    return out;
}

} // namespace forgelens
