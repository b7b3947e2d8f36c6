#pragma once

// Dense row-major tensors with a reverse-mode gradient tape.
//
// Ops record a backward closure on the thread's active Tape when at least one
// input requires a gradient; without an active tape they run as plain
// functions. Tapes are append-only and replayed once, in reverse order.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "forgelens/core/error.hpp"

namespace forgelens {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

template <class T>
struct TensorStorage {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until a gradient arrives
    bool requires_grad = false;

    std::vector<T>& grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), T(0));
        return grad;
    }
};

template <class T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
        : s_(std::make_shared<TensorStorage<T>>()) {
        for (auto d : shape)
            if (d == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
        if (shape_numel(shape) != values.size())
            throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                                 " values");
        s_->shape = std::move(shape);
        s_->value = std::move(values);
        s_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), T(0), requires_grad); }

    static Tensor full(Shape shape, T v, bool requires_grad = false) {
        const auto n = shape_numel(shape);
        return Tensor(std::move(shape), std::vector<T>(n, v), requires_grad);
    }

    static Tensor scalar(T v) { return Tensor(Shape{1}, {v}); }

    bool defined() const { return static_cast<bool>(s_); }
    const Shape& shape() const { return s_->shape; }
    std::size_t rank() const { return s_->shape.size(); }
    std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
    std::size_t numel() const { return s_->value.size(); }

    std::span<const T> values() const { return s_->value; }
    /// Direct write access, for optimizers and initializers. Not recorded.
    std::span<T> mutable_values() { return s_->value; }
    const std::vector<T>& vec() const { return s_->value; }

    bool requires_grad() const { return s_->requires_grad; }
    void set_requires_grad(bool on) { s_->requires_grad = on; }
    bool has_grad() const { return !s_->grad.empty(); }
    std::span<const T> grad() const { return s_->grad; }
    void zero_grad() { s_->grad.clear(); }

    T item() const {
        if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
        return s_->value[0];
    }

    T operator[](std::size_t i) const { return s_->value[i]; }

    /// Fresh tensor with the same values and no gradient history.
    Tensor detach() const { return Tensor(shape(), s_->value, false); }

    const std::shared_ptr<TensorStorage<T>>& storage() const { return s_; }
    bool same_storage(const Tensor& o) const { return s_ == o.s_; }

private:
    std::shared_ptr<TensorStorage<T>> s_;
};

template <class T>
class Tape;

template <class T>
Tape<T>*& active_tape() {
    thread_local Tape<T>* tape = nullptr;
    return tape;
}

template <class T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void()> backward) {
        if (consumed_) throw TapeError("tape already replayed; reset() before recording again");
        nodes_.push_back(std::move(backward));
    }

    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    /// Seed d(root)/d(root) = 1 and replay nodes newest-first. Leaves that
    /// require a gradient accumulate into their grad buffers.
    void backward(const Tensor<T>& root) {
        if (consumed_) throw TapeError("backward() called twice on the same tape without reset()");
        if (!root.defined() || root.numel() != 1)
            throw TapeError("backward() needs a scalar root, got " + (root.defined() ? shape_str(root.shape()) : "undefined"));
        if (!root.requires_grad()) throw TapeError("backward() root was not produced on a recording tape");
        root.storage()->grad_buffer()[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
        consumed_ = true;
    }

    void reset() {
        nodes_.clear();
        consumed_ = false;
    }

private:
    std::vector<std::function<void()>> nodes_;
    bool consumed_ = false;
};

/// Makes `tape` the thread's recording tape for the scope's lifetime.
template <class T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& tape) : prev_(active_tape<T>()) { active_tape<T>() = &tape; }
    ~TapeScope() { active_tape<T>() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* prev_;
};

/// Suspends recording for the scope (inference inside a training step).
template <class T>
class NoGradScope {
public:
    NoGradScope() : prev_(active_tape<T>()) { active_tape<T>() = nullptr; }
    ~NoGradScope() { active_tape<T>() = prev_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    Tape<T>* prev_;
};

namespace detail {

template <class T>
using StoragePtr = std::shared_ptr<TensorStorage<T>>;

/// Wrap freshly computed values as an op result, recording `backward` when
/// gradients are needed. `backward(out_grad)` receives the output gradient
/// and must only touch inputs whose requires_grad is set.
template <class T, class Backward>
Tensor<T> finish(Shape shape, std::vector<T> values, std::initializer_list<const Tensor<T>*> inputs, Backward&& backward) {
    Tensor<T> out(std::move(shape), std::move(values));
    Tape<T>* tape = active_tape<T>();
    if (!tape) return out;
    bool any = false;
    for (const auto* in : inputs) any = any || (in->defined() && in->requires_grad());
    if (!any) return out;
    out.storage()->requires_grad = true;
    std::weak_ptr<TensorStorage<T>> weak = out.storage();
    tape->record([weak, fn = std::forward<Backward>(backward)]() mutable {
        auto o = weak.lock();
        if (!o || o->grad.empty()) return;
        fn(o->grad);
    });
    return out;
}

template <class T>
Tensor<T> finish_vec(Shape shape, std::vector<T> values, const std::vector<Tensor<T>>& inputs,
                     std::function<void(const std::vector<T>&)> backward) {
    Tensor<T> out(std::move(shape), std::move(values));
    Tape<T>* tape = active_tape<T>();
    if (!tape) return out;
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (!any) return out;
    out.storage()->requires_grad = true;
    std::weak_ptr<TensorStorage<T>> weak = out.storage();
    tape->record([weak, fn = std::move(backward)]() {
        auto o = weak.lock();
        if (!o || o->grad.empty()) return;
        fn(o->grad);
    });
    return out;
}

} // namespace detail

} // namespace forgelens
