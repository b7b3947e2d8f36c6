#pragma once

// RMSprop and AdamW with decoupled weight decay, plus the group freeze
// schedules applied between epochs.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "forgelens/core/error.hpp"
#include "forgelens/nn.hpp"

namespace forgelens {

/// v <- alpha v + (1 - alpha) g^2;  theta <- theta - lr g / (sqrt(v) + eps).
template <class T>
void rmsprop_step(std::span<T> theta, std::span<const T> grad, std::span<T> v, T lr, T alpha, T eps) {
    if (theta.size() != grad.size() || theta.size() != v.size()) throw DimensionError("rmsprop_step: size mismatch");
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const T g = grad[i];
        v[i] = alpha * v[i] + (T(1) - alpha) * g * g;
        theta[i] -= lr * g / (std::sqrt(v[i]) + eps);
    }
}

/// theta <- theta (1 - lr wd), then the bias-corrected Adam update for step
/// count t (1 for the first step).
template <class T>
void adamw_step(std::span<T> theta, std::span<const T> grad, std::span<T> m, std::span<T> v, std::uint64_t t, T lr, T beta1,
                T beta2, T eps, T weight_decay) {
    if (theta.size() != grad.size() || theta.size() != m.size() || theta.size() != v.size())
        throw DimensionError("adamw_step: size mismatch");
    if (t == 0) throw ConfigError("adamw_step: step count starts at 1");
    const T decay = T(1) - lr * weight_decay;
    const T c1 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta1), static_cast<double>(t)));
    const T c2 = T(1) - static_cast<T>(std::pow(static_cast<double>(beta2), static_cast<double>(t)));
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const T g = grad[i];
        theta[i] *= decay;
        m[i] = beta1 * m[i] + (T(1) - beta1) * g;
        v[i] = beta2 * v[i] + (T(1) - beta2) * g * g;
        const T mhat = m[i] / c1;
        const T vhat = v[i] / c2;
        theta[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

enum class OptimizerKind { rmsprop, adamw };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::rmsprop ? "rmsprop" : "adamw"; }

inline OptimizerKind parse_optimizer(const std::string& s) {
    if (s == "rmsprop") return OptimizerKind::rmsprop;
    if (s == "adamw") return OptimizerKind::adamw;
    throw ConfigError("unknown optimizer '" + s + "' (expected rmsprop or adamw)");
}

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adamw;
    double lr = 1e-4;
    double alpha = 0.99;  // rmsprop
    double beta1 = 0.9;   // adamw
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;  // adamw only

    void validate() const {
        if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and >= 0");
        if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("rmsprop alpha must be in (0, 1)");
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam betas must be in [0, 1)");
        if (!(eps > 0.0)) throw ConfigError("optimizer eps must be positive");
        if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
    }
};

/// Per-parameter optimizer state, index-aligned with ParameterSet::params().
/// RMSprop uses `second`; AdamW uses both moments and a per-parameter step
/// count so parameters unfrozen late start their bias correction at 1.
template <class T>
class Optimizer {
public:
    Optimizer(OptimizerConfig cfg, const ParameterSet<T>& ps) : cfg_(cfg) {
        cfg_.validate();
        for (const auto& p : ps.params()) {
            first_.emplace_back(cfg_.kind == OptimizerKind::adamw ? p.tensor.numel() : 0, T(0));
            second_.emplace_back(p.tensor.numel(), T(0));
            steps_.push_back(0);
        }
    }

    const OptimizerConfig& config() const { return cfg_; }

    /// Updates every parameter whose group is trainable in `mask` (indexed like
    /// ps.groups()); frozen parameters and their state are left untouched.
    /// A missing gradient counts as zero. Any non-finite gradient aborts the
    /// step before anything is modified.
    void step(const ParameterSet<T>& ps, const std::vector<bool>& mask) {
        const auto& params = ps.params();
        if (params.size() != second_.size()) throw ConfigError("optimizer state does not match the parameter set");
        std::vector<bool> active(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            active[i] = mask.empty() || mask.at(ps.group_index(params[i].group));
            if (!active[i] || !params[i].tensor.has_grad()) continue;
            for (T g : params[i].tensor.grad())
                if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + params[i].name);
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!active[i]) continue;
            Tensor<T> t = params[i].tensor;
            std::vector<T> zeros;
            std::span<const T> g = t.grad();
            if (!t.has_grad()) {
                zeros.assign(t.numel(), T(0));
                g = zeros;
            }
            ++steps_[i];
            if (cfg_.kind == OptimizerKind::rmsprop)
                rmsprop_step<T>(t.mutable_values(), g, second_[i], static_cast<T>(cfg_.lr), static_cast<T>(cfg_.alpha),
                                static_cast<T>(cfg_.eps));
            else
                adamw_step<T>(t.mutable_values(), g, first_[i], second_[i], steps_[i], static_cast<T>(cfg_.lr),
                              static_cast<T>(cfg_.beta1), static_cast<T>(cfg_.beta2), static_cast<T>(cfg_.eps),
                              static_cast<T>(cfg_.weight_decay));
        }
    }

    std::vector<std::vector<T>>& first_moments() { return first_; }
    std::vector<std::vector<T>>& second_moments() { return second_; }
    std::vector<std::uint64_t>& steps() { return steps_; }
    const std::vector<std::vector<T>>& first_moments() const { return first_; }
    const std::vector<std::vector<T>>& second_moments() const { return second_; }
    const std::vector<std::uint64_t>& steps() const { return steps_; }

private:
    OptimizerConfig cfg_;
    std::vector<std::vector<T>> first_, second_;
    std::vector<std::uint64_t> steps_;
};

// ---------------------------------------------------------------------------
// Freeze schedules

struct FreezePolicy {
    enum class Kind { none, last_k, gradual };
    Kind kind = Kind::none;
    std::size_t k = 0;                 // last_k: trainable groups; gradual: initial trainable groups
    std::size_t epochs_per_stage = 1;  // gradual only

    static FreezePolicy none() { return {}; }
    static FreezePolicy last_k(std::size_t k) { return {Kind::last_k, k, 1}; }
    static FreezePolicy gradual(std::size_t start_k, std::size_t epochs_per_stage) {
        return {Kind::gradual, start_k, epochs_per_stage};
    }

    /// Accepts "none", "last_k(K)" and "gradual(START_K,EPOCHS_PER_STAGE)".
    static FreezePolicy parse(const std::string& s) {
        auto args = [&](const std::string& prefix) {
            if (s.rfind(prefix + "(", 0) != 0 || s.back() != ')') return std::vector<std::size_t>{};
            std::vector<std::size_t> out;
            std::string body = s.substr(prefix.size() + 1, s.size() - prefix.size() - 2);
            std::size_t pos = 0;
            while (pos <= body.size()) {
                const std::size_t comma = body.find(',', pos);
                const std::string tok = body.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
                if (tok.empty() || tok.find_first_not_of("0123456789 ") != std::string::npos)
                    throw ConfigError("bad freeze policy '" + s + "'");
                out.push_back(std::stoull(tok));
                if (comma == std::string::npos) break;
                pos = comma + 1;
            }
            return out;
        };
        if (s == "none") return none();
        if (auto a = args("last_k"); a.size() == 1) return last_k(a[0]);
        if (auto a = args("gradual"); a.size() == 2) {
            if (a[1] == 0) throw ConfigError("gradual freeze needs epochs_per_stage >= 1");
            return gradual(a[0], a[1]);
        }
        throw ConfigError("unknown freeze policy '" + s + "' (expected none, last_k(K) or gradual(K,E))");
    }

    std::string str() const {
        switch (kind) {
        case Kind::none: return "none";
        case Kind::last_k: return "last_k(" + std::to_string(k) + ")";
        case Kind::gradual: return "gradual(" + std::to_string(k) + "," + std::to_string(epochs_per_stage) + ")";
        }
        return "?";
    }
};

/// Trainable mask over `group_count` groups in definition order, given the
/// number of completed epochs. Trainable groups are always the last ones.
inline std::vector<bool> apply_freeze_policy(std::size_t group_count, const FreezePolicy& policy, std::size_t epoch) {
    std::size_t trainable = group_count;
    switch (policy.kind) {
    case FreezePolicy::Kind::none: break;
    case FreezePolicy::Kind::last_k:
    case FreezePolicy::Kind::gradual:
        if (policy.k == 0 || policy.k > group_count)
            throw ConfigError("freeze policy " + policy.str() + " needs 1 <= k <= " + std::to_string(group_count) +
                              " parameter groups");
        trainable = policy.k;
        if (policy.kind == FreezePolicy::Kind::gradual)
            trainable = std::min(group_count, policy.k + epoch / policy.epochs_per_stage);
        break;
    }
    std::vector<bool> mask(group_count, false);
    for (std::size_t i = group_count - trainable; i < group_count; ++i) mask[i] = true;
    return mask;
}

/// Mark parameters of frozen groups as not requiring gradients, so backward
/// skips them; trainable groups are re-enabled.
template <class T>
void set_trainable(const ParameterSet<T>& ps, const std::vector<bool>& mask) {
    for (const auto& p : ps.params()) {
        Tensor<T> t = p.tensor;
        t.set_requires_grad(mask.at(ps.group_index(p.group)));
    }
}

} // namespace forgelens
