#pragma once

// Parameter registry, basic layers and the model interface shared by every
// backbone.

#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "forgelens/core/error.hpp"
#include "forgelens/core/rng.hpp"
#include "forgelens/ops.hpp"
#include "forgelens/tensor.hpp"

namespace forgelens {

enum class Mode { train, eval };

/// Per-call forward settings. `rng` is required only when training with
/// nonzero dropout.
struct ForwardContext {
    Mode mode = Mode::eval;
    Philox* rng = nullptr;

    bool training() const { return mode == Mode::train; }
};

template <class T>
struct NamedTensor {
    std::string name;
    std::string group;
    Tensor<T> tensor;
};

/// Ordered registry of trainable parameters and non-trainable buffers.
/// Groups appear in first-registration order; that order defines "top" for
/// freezing.
template <class T>
class ParameterSet {
public:
    void add(std::string name, std::string group, Tensor<T> t) {
        for (const auto& p : params_)
            if (p.name == name) throw ConfigError("duplicate parameter name " + name);
        t.set_requires_grad(true);
        note_group(group);
        params_.push_back({std::move(name), std::move(group), std::move(t)});
    }

    void add_buffer(std::string name, std::string group, Tensor<T> t) {
        note_group(group);
        buffers_.push_back({std::move(name), std::move(group), std::move(t)});
    }

    /// Append another set, prefixing names and groups with `prefix` and
    /// leaving out the group named `skip_group`.
    void merge(const ParameterSet& other, const std::string& prefix, const std::string& skip_group = {}) {
        for (const auto& p : other.params_)
            if (p.group != skip_group) add(prefix + p.name, prefix + p.group, p.tensor);
        for (const auto& b : other.buffers_)
            if (b.group != skip_group) add_buffer(prefix + b.name, prefix + b.group, b.tensor);
    }

    std::vector<NamedTensor<T>>& params() { return params_; }
    const std::vector<NamedTensor<T>>& params() const { return params_; }
    std::vector<NamedTensor<T>>& buffers() { return buffers_; }
    const std::vector<NamedTensor<T>>& buffers() const { return buffers_; }
    const std::vector<std::string>& groups() const { return groups_; }

    std::size_t group_index(const std::string& g) const {
        for (std::size_t i = 0; i < groups_.size(); ++i)
            if (groups_[i] == g) return i;
        throw ConfigError("unknown parameter group " + g);
    }

    const NamedTensor<T>& find(const std::string& name) const {
        for (const auto& p : params_)
            if (p.name == name) return p;
        throw ConfigError("unknown parameter " + name);
    }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.tensor.numel();
        return n;
    }

    /// Clears gradients through the shared handles.
    void zero_grad() const {
        for (const auto& p : params_) {
            Tensor<T> t = p.tensor;
            t.zero_grad();
        }
    }

private:
    void note_group(const std::string& g) {
        for (const auto& x : groups_)
            if (x == g) return;
        groups_.push_back(g);
    }

    std::vector<NamedTensor<T>> params_;
    std::vector<NamedTensor<T>> buffers_;
    std::vector<std::string> groups_;
};

namespace init {

template <class T>
Tensor<T> trunc_normal(Shape shape, double sigma, Philox& rng) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.truncated_normal(sigma));
    return Tensor<T>(std::move(shape), std::move(v));
}

/// He-normal for ReLU stacks: sigma = sqrt(2 / fan_in).
template <class T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, Philox& rng) {
    const double sigma = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal() * sigma);
    return Tensor<T>(std::move(shape), std::move(v));
}

} // namespace init

/// Weight initialization scheme for linear and conv layers.
enum class InitScheme { trunc_normal_002, he_normal };

template <class T>
struct Linear {
    Tensor<T> weight;  // [in, out]
    Tensor<T> bias;    // [out] or undefined

    Linear() = default;
    Linear(std::size_t in, std::size_t out, bool with_bias, Philox& rng, InitScheme scheme = InitScheme::trunc_normal_002) {
        weight = scheme == InitScheme::he_normal ? init::he_normal<T>({in, out}, in, rng)
                                                 : init::trunc_normal<T>({in, out}, 0.02, rng);
        if (with_bias) bias = Tensor<T>::zeros({out});
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }

    void collect(ParameterSet<T>& ps, const std::string& name, const std::string& group) const {
        ps.add(name + ".weight", group, weight);
        if (bias.defined()) ps.add(name + ".bias", group, bias);
    }
};

template <class T>
struct LayerNorm {
    Tensor<T> gamma, beta;

    LayerNorm() = default;
    explicit LayerNorm(std::size_t d) : gamma(Tensor<T>::full({d}, T(1))), beta(Tensor<T>::zeros({d})) {}

    Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }

    void collect(ParameterSet<T>& ps, const std::string& name, const std::string& group) const {
        ps.add(name + ".gamma", group, gamma);
        ps.add(name + ".beta", group, beta);
    }
};

template <class T>
struct Conv2d {
    Tensor<T> weight;  // [F, C, k, k]
    Tensor<T> bias;    // [F] or undefined
    std::size_t stride = 1, padding = 0;

    Conv2d() = default;
    Conv2d(std::size_t in, std::size_t out, std::size_t k, std::size_t stride_, std::size_t padding_, bool with_bias,
           Philox& rng, InitScheme scheme = InitScheme::he_normal)
        : stride(stride_), padding(padding_) {
        weight = scheme == InitScheme::he_normal ? init::he_normal<T>({out, in, k, k}, in * k * k, rng)
                                                 : init::trunc_normal<T>({out, in, k, k}, 0.02, rng);
        if (with_bias) bias = Tensor<T>::zeros({out});
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, padding); }

    void collect(ParameterSet<T>& ps, const std::string& name, const std::string& group) const {
        ps.add(name + ".weight", group, weight);
        if (bias.defined()) ps.add(name + ".bias", group, bias);
    }
};

template <class T>
struct BatchNorm {
    Tensor<T> gamma, beta;
    RunningStats<T> stats;

    BatchNorm() = default;
    explicit BatchNorm(std::size_t c)
        : gamma(Tensor<T>::full({c}, T(1))), beta(Tensor<T>::zeros({c})), stats(c) {}

    Tensor<T> operator()(const Tensor<T>& x, const ForwardContext& ctx) {
        return batch_norm(x, gamma, beta, stats, ctx.training());
    }

    void collect(ParameterSet<T>& ps, const std::string& name, const std::string& group) const {
        ps.add(name + ".gamma", group, gamma);
        ps.add(name + ".beta", group, beta);
        ps.add_buffer(name + ".running_mean", group, stats.mean);
        ps.add_buffer(name + ".running_var", group, stats.var);
    }
};

template <class T>
struct ModelOutput {
    Tensor<T> logits;    // [N, 2]
    Tensor<T> features;  // [N, D], pooled penultimate activations
    Tensor<T> tokens;    // [N, tokens, channels], pre-pooling spatial features
};

/// Common interface of every classifier in the library.
template <class T>
class Model {
public:
    virtual ~Model() = default;
    virtual ModelOutput<T> forward(const Tensor<T>& x, const ForwardContext& ctx) = 0;
    virtual const ParameterSet<T>& parameters() const = 0;
    /// Architecture description, enough to rebuild the model with `build_model`.
    virtual nlohmann::json config_json() const = 0;
    virtual std::size_t image_size() const = 0;
    virtual std::size_t feature_dim() const = 0;
};

} // namespace forgelens
