#pragma once

// Shared helpers for the test binaries: scratch directories, random tensors
// and a central finite-difference gradient checker.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <unistd.h>

#include "forgelens/core/rng.hpp"
#include "forgelens/image/io.hpp"
#include "forgelens/nn.hpp"
#include "forgelens/ops.hpp"
#include "forgelens/tensor.hpp"

namespace fl_test {

namespace fs = std::filesystem;
using forgelens::Philox;
using forgelens::Shape;
using forgelens::Tensor;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = fs::temp_directory_path() /
                ("forgelens_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& s) const { return path_ / s; }

private:
    fs::path path_;
};

template <class T = double>
Tensor<T> random_tensor(Shape shape, Philox& rng, double scale = 1.0, bool requires_grad = false) {
    std::vector<T> v(forgelens::shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(scale * (2.0 * rng.uniform() - 1.0));
    return Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

inline std::vector<int> random_labels(std::size_t n, Philox& rng) {
    std::vector<int> out(n);
    for (auto& l : out) l = static_cast<int>(rng.below(2));
    return out;
}

/// Overwrite every parameter of `ps` with uniform draws in [-scale, scale].
template <class T>
void randomize_parameters(const forgelens::ParameterSet<T>& ps, Philox& rng, double scale) {
    for (const auto& p : ps.params()) {
        Tensor<T> t = p.tensor;
        for (auto& v : t.mutable_values()) v = static_cast<T>(scale * (2.0 * rng.uniform() - 1.0));
    }
}

inline std::vector<std::uint8_t> file_bytes(const fs::path& p) { return forgelens::read_file_bytes(p); }

struct GradLeaf {
    std::string name;
    Tensor<double> tensor;
};

struct GradReport {
    double max_rel_error = 0.0;
    std::string worst_leaf;
    std::size_t checked = 0;
};

/// Compares the tape gradient of a scalar loss against central differences
/// (step h) for every leaf. The error of one leaf is
/// |g_tape - g_fd| / max(|g_tape|, |g_fd|, floor) over the checked elements
/// (2-norms); the report holds the largest. Leaves with more than
/// `max_elements` entries are checked on a seeded random subset of that size.
inline GradReport check_gradients(const std::function<Tensor<double>()>& loss_fn, const std::vector<GradLeaf>& leaves,
                                  double h = 1e-4, std::size_t max_elements = std::numeric_limits<std::size_t>::max(),
                                  std::uint64_t sample_seed = 0, double floor = 1e-8) {
    for (const auto& leaf : leaves) {
        Tensor<double> t = leaf.tensor;
        t.zero_grad();
        t.set_requires_grad(true);
    }
    {
        forgelens::Tape<double> tape;
        forgelens::TapeScope<double> scope(tape);
        const auto loss = loss_fn();
        tape.backward(loss);
    }
    GradReport report;
    Philox pick(sample_seed, 7);
    for (const auto& leaf : leaves) {
        Tensor<double> t = leaf.tensor;
        const std::size_t n = t.numel();
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        if (n > max_elements) {
            for (std::size_t i = 0; i < max_elements; ++i) std::swap(idx[i], idx[i + pick.below(n - i)]);
            idx.resize(max_elements);
        }
        std::vector<double> analytic(n, 0.0);
        if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
        double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
        for (std::size_t i : idx) {
            const double orig = t.mutable_values()[i];
            t.mutable_values()[i] = orig + h;
            const double up = loss_fn().item();
            t.mutable_values()[i] = orig - h;
            const double down = loss_fn().item();
            t.mutable_values()[i] = orig;
            const double fd = (up - down) / (2.0 * h);
            diff2 += (analytic[i] - fd) * (analytic[i] - fd);
            a2 += analytic[i] * analytic[i];
            n2 += fd * fd;
        }
        const double rel = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), floor});
        report.checked += idx.size();
        if (report.worst_leaf.empty() || rel > report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst_leaf = leaf.name;
        }
    }
    for (const auto& leaf : leaves) {
        Tensor<double> t = leaf.tensor;
        t.zero_grad();
    }
    return report;
}

/// Every parameter of a model as a gradient leaf.
inline std::vector<GradLeaf> parameter_leaves(const forgelens::ParameterSet<double>& ps) {
    std::vector<GradLeaf> out;
    for (const auto& p : ps.params()) out.push_back({p.name, p.tensor});
    return out;
}

/// Model-level check: cross-entropy of a train-mode forward whose dropout
/// stream is rebuilt identically for every evaluation. The step is small
/// enough that a central difference almost never straddles a ReLU or
/// max-pool switch point, and large enough that double round-off stays
/// near 1e-10 relative. Gradient norms below the 1e-6 floor count as
/// absolute errors against that floor; key biases of attention layers have
/// an identically zero gradient.
inline GradReport check_model_gradients(forgelens::Model<double>& model, const Tensor<double>& x, const std::vector<int>& labels,
                                        std::size_t max_elements = 6, std::uint64_t seed = 0) {
    auto loss = [&] {
        Philox drop(seed, 99);
        const auto out = model.forward(x, forgelens::ForwardContext{forgelens::Mode::train, &drop});
        return forgelens::cross_entropy_loss(out.logits, labels);
    };
    return check_gradients(loss, parameter_leaves(model.parameters()), 1e-6, max_elements, seed, 1e-6);
}

} // namespace fl_test
