#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "forgelens/core/error.hpp"
#include "forgelens/core/rng.hpp"
#include "forgelens/tensor.hpp"

namespace forgelens {

namespace detail {

template <class T>
void accumulate(const StoragePtr<T>& s, std::size_t i, T v) {
    s->grad_buffer()[i] += v;
}

/// C[m,n] (+)= op(A) * op(B), summing over the inner index in ascending order.
/// trans_a: A stored [k,m]; trans_b: B stored [n,k].
template <class T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool trans_a, bool trans_b) {
    if (!trans_a && !trans_b) {
        for (std::size_t i = 0; i < m; ++i) {
            T* crow = c + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                const T av = a[i * k + p];
                const T* brow = b + p * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (trans_a && !trans_b) {
        for (std::size_t p = 0; p < k; ++p) {
            const T* arow = a + p * m;
            const T* brow = b + p * n;
            for (std::size_t i = 0; i < m; ++i) {
                const T av = arow[i];
                T* crow = c + i * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (!trans_a && trans_b) {
        for (std::size_t i = 0; i < m; ++i) {
            const T* arow = a + i * k;
            for (std::size_t j = 0; j < n; ++j) {
                const T* brow = b + j * k;
                T acc = T(0);
                for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
                c[i * n + j] += acc;
            }
        }
    } else {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                T acc = T(0);
                for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * b[j * k + p];
                c[i * n + j] += acc;
            }
    }
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw DimensionError(msg);
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw DimensionError("shapes " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
        out[i] = std::max(da, db);
    }
    return out;
}

/// Flat source index for every output element of a broadcast.
inline std::vector<std::size_t> broadcast_index(const Shape& src, const Shape& out) {
    const std::size_t r = out.size();
    std::vector<std::size_t> stride(r, 0);
    std::size_t s = 1;
    for (std::size_t i = src.size(); i-- > 0;) {
        const std::size_t oi = i + (r - src.size());
        stride[oi] = src[i] == 1 ? 0 : s;
        s *= src[i];
    }
    const std::size_t n = shape_numel(out);
    std::vector<std::size_t> idx(n);
    std::vector<std::size_t> pos(r, 0);
    std::size_t cur = 0;
    for (std::size_t f = 0; f < n; ++f) {
        idx[f] = cur;
        for (std::size_t d = r; d-- > 0;) {
            ++pos[d];
            cur += stride[d];
            if (pos[d] < out[d]) break;
            cur -= stride[d] * pos[d];
            pos[d] = 0;
        }
    }
    return idx;
}

inline std::size_t norm_axis(long axis, std::size_t rank) {
    const long r = static_cast<long>(rank);
    if (axis < -r || axis >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
    return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

enum class BinaryOp { add, sub, mul };

template <class T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinaryOp op) {
    const Shape out_shape = detail::broadcast_shape(a.shape(), b.shape());
    const std::size_t n = shape_numel(out_shape);
    const bool same = a.shape() == out_shape && b.shape() == out_shape;
    std::vector<std::size_t> ia, ib;
    if (!same) {
        ia = detail::broadcast_index(a.shape(), out_shape);
        ib = detail::broadcast_index(b.shape(), out_shape);
    }
    const auto& av = a.vec();
    const auto& bv = b.vec();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const T x = av[same ? i : ia[i]];
        const T y = bv[same ? i : ib[i]];
        out[i] = op == BinaryOp::add ? x + y : op == BinaryOp::sub ? x - y : x * y;
    }
    auto sa = a.storage(), sb = b.storage();
    return detail::finish<T>(out_shape, std::move(out), {&a, &b},
                             [sa, sb, op, same, ia = std::move(ia), ib = std::move(ib), n](const std::vector<T>& g) {
                                 if (sa->requires_grad) {
                                     auto& ga = sa->grad_buffer();
                                     for (std::size_t i = 0; i < n; ++i) {
                                         const T d = op == BinaryOp::mul ? g[i] * sb->value[same ? i : ib[i]] : g[i];
                                         ga[same ? i : ia[i]] += d;
                                     }
                                 }
                                 if (sb->requires_grad) {
                                     auto& gb = sb->grad_buffer();
                                     for (std::size_t i = 0; i < n; ++i) {
                                         const T d = op == BinaryOp::mul   ? g[i] * sa->value[same ? i : ia[i]]
                                                     : op == BinaryOp::sub ? -g[i]
                                                                           : g[i];
                                         gb[same ? i : ib[i]] += d;
                                     }
                                 }
                             });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary(a, b, BinaryOp::add);
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary(a, b, BinaryOp::sub);
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return binary(a, b, BinaryOp::mul);
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T s) {
    std::vector<T> out(x.vec());
    for (auto& v : out) v *= s;
    auto sx = x.storage();
    return detail::finish<T>(x.shape(), std::move(out), {&x}, [sx, s](const std::vector<T>& g) {
        auto& gx = sx->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
    });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.vec());
    for (auto& v : out) v = v > T(0) ? v : T(0);
    auto sx = x.storage();
    return detail::finish<T>(x.shape(), std::move(out), {&x}, [sx](const std::vector<T>& g) {
        auto& gx = sx->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (sx->value[i] > T(0)) gx[i] += g[i];
    });
}

/// GELU with the exact Gaussian CDF.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
    const T inv_sqrt2 = T(1) / std::sqrt(T(2));
    const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
    std::vector<T> out(x.numel());
    const auto& xv = x.vec();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * inv_sqrt2));
    auto sx = x.storage();
    return detail::finish<T>(x.shape(), std::move(out), {&x}, [sx, inv_sqrt2, inv_sqrt2pi](const std::vector<T>& g) {
        auto& gx = sx->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T v = sx->value[i];
            const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
            const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
            gx[i] += g[i] * (cdf + v * pdf);
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.vec()) acc += v;
    auto sx = x.storage();
    return detail::finish<T>(Shape{1}, {acc}, {&x}, [sx](const std::vector<T>& g) {
        auto& gx = sx->grad_buffer();
        for (auto& v : gx) v += g[0];
    });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Mean over one axis; the axis is removed from the shape.
template <class T>
Tensor<T> mean_axis(const Tensor<T>& x, long axis_in) {
    const std::size_t axis = detail::norm_axis(axis_in, x.rank());
    const Shape& s = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t n = s[axis];
    Shape out_shape;
    for (std::size_t i = 0; i < s.size(); ++i)
        if (i != axis) out_shape.push_back(s[i]);
    if (out_shape.empty()) out_shape.push_back(1);
    std::vector<T> out(outer * inner, T(0));
    const auto& xv = x.vec();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < n; ++k)
            for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += xv[(o * n + k) * inner + i];
    const T inv = T(1) / static_cast<T>(n);
    for (auto& v : out) v *= inv;
    auto sx = x.storage();
    return detail::finish<T>(out_shape, std::move(out), {&x}, [sx, outer, inner, n, inv](const std::vector<T>& g) {
        auto& gx = sx->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t k = 0; k < n; ++k)
                for (std::size_t i = 0; i < inner; ++i) gx[(o * n + k) * inner + i] += g[o * inner + i] * inv;
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 operands, got " + shape_str(a.shape()) +
                                                        " and " + shape_str(b.shape()));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    detail::require(b.dim(0) == k, "matmul inner extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<T> out(m * n, T(0));
    detail::gemm(a.vec().data(), b.vec().data(), out.data(), m, k, n, false, false);
    auto sa = a.storage(), sb = b.storage();
    return detail::finish<T>(Shape{m, n}, std::move(out), {&a, &b}, [sa, sb, m, k, n](const std::vector<T>& g) {
        if (sa->requires_grad) detail::gemm(g.data(), sb->value.data(), sa->grad_buffer().data(), m, n, k, false, true);
        if (sb->requires_grad) detail::gemm(sa->value.data(), g.data(), sb->grad_buffer().data(), k, m, n, true, false);
    });
}

/// Batched product over the leading axis. With transpose_b, b is [B, n, k].
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
    detail::require(a.rank() == 3 && b.rank() == 3, "bmm expects rank-3 operands");
    const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
    const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
    detail::require(b.dim(0) == batch && (transpose_b ? b.dim(2) : b.dim(1)) == k,
                    "bmm extents differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    std::vector<T> out(batch * m * n, T(0));
    for (std::size_t i = 0; i < batch; ++i)
        detail::gemm(a.vec().data() + i * m * k, b.vec().data() + i * k * n, out.data() + i * m * n, m, k, n, false,
                     transpose_b);
    auto sa = a.storage(), sb = b.storage();
    return detail::finish<T>(Shape{batch, m, n}, std::move(out), {&a, &b},
                             [sa, sb, batch, m, k, n, transpose_b](const std::vector<T>& g) {
                                 for (std::size_t i = 0; i < batch; ++i) {
                                     const T* gi = g.data() + i * m * n;
                                     if (sa->requires_grad)
                                         detail::gemm(gi, sb->value.data() + i * k * n, sa->grad_buffer().data() + i * m * k, m,
                                                      n, k, false, !transpose_b);
                                     if (sb->requires_grad) {
                                         if (transpose_b)  // dB[n,k] = G^T A
                                             detail::gemm(gi, sa->value.data() + i * m * k, sb->grad_buffer().data() + i * k * n,
                                                          n, m, k, true, false);
                                         else  // dB[k,n] = A^T G
                                             detail::gemm(sa->value.data() + i * m * k, gi, sb->grad_buffer().data() + i * k * n,
                                                          k, m, n, true, false);
                                     }
                                 }
                             });
}

/// y = x W + b over the last axis; x is [..., in], W is [in, out], b is [out] or undefined.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    detail::require(w.rank() == 2 && x.rank() >= 1 && x.shape().back() == w.dim(0),
                    "linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
    const std::size_t in = w.dim(0), out_f = w.dim(1);
    const std::size_t rows = x.numel() / in;
    if (b.defined()) detail::require(b.rank() == 1 && b.dim(0) == out_f, "linear: bias extent");
    std::vector<T> out(rows * out_f, T(0));
    detail::gemm(x.vec().data(), w.vec().data(), out.data(), rows, in, out_f, false, false);
    if (b.defined())
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < out_f; ++j) out[r * out_f + j] += b.vec()[j];
    Shape shape = x.shape();
    shape.back() = out_f;
    auto sx = x.storage(), sw = w.storage();
    auto sb = b.defined() ? b.storage() : nullptr;
    return detail::finish<T>(std::move(shape), std::move(out), {&x, &w, &b},
                             [sx, sw, sb, rows, in, out_f](const std::vector<T>& g) {
                                 if (sx->requires_grad)
                                     detail::gemm(g.data(), sw->value.data(), sx->grad_buffer().data(), rows, out_f, in, false, true);
                                 if (sw->requires_grad)
                                     detail::gemm(sx->value.data(), g.data(), sw->grad_buffer().data(), in, rows, out_f, true, false);
                                 if (sb && sb->requires_grad) {
                                     auto& gb = sb->grad_buffer();
                                     for (std::size_t r = 0; r < rows; ++r)
                                         for (std::size_t j = 0; j < out_f; ++j) gb[j] += g[r * out_f + j];
                                 }
                             });
}

// ---------------------------------------------------------------------------
// Softmax and loss

/// Softmax along `axis`, computed with max subtraction.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, long axis_in = -1) {
    const std::size_t axis = detail::norm_axis(axis_in, x.rank());
    const Shape& s = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t n = s[axis];
    if (n == 0) throw DimensionError("softmax over an empty axis");
    const auto& xv = x.vec();
    std::vector<T> out(xv.size());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n * inner + i;
            T mx = xv[base];
            for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, xv[base + k * inner]);
            T z = T(0);
            for (std::size_t k = 0; k < n; ++k) {
                const T e = std::exp(xv[base + k * inner] - mx);
                out[base + k * inner] = e;
                z += e;
            }
            for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= z;
        }
    auto sx = x.storage();
    auto y = std::make_shared<std::vector<T>>(out);
    return detail::finish<T>(s, std::move(out), {&x}, [sx, y, outer, inner, n](const std::vector<T>& g) {
        auto& gx = sx->grad_buffer();
        const auto& yv = *y;
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t base = o * n * inner + i;
                T dot = T(0);
                for (std::size_t k = 0; k < n; ++k) dot += g[base + k * inner] * yv[base + k * inner];
                for (std::size_t k = 0; k < n; ++k) gx[base + k * inner] += yv[base + k * inner] * (g[base + k * inner] - dot);
            }
    });
}

/// Mean over the batch of -log softmax(logits)[label]. logits is [N, C].
template <class T>
Tensor<T> cross_entropy_loss(const Tensor<T>& logits, const std::vector<int>& labels) {
    detail::require(logits.rank() == 2, "cross_entropy_loss expects [N, C] logits");
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    if (labels.size() != n) throw DimensionError("cross_entropy_loss: label count differs from batch");
    if (n == 0) throw DimensionError("cross_entropy_loss: empty batch");
    for (int l : labels)
        if (l < 0 || static_cast<std::size_t>(l) >= c) throw ConfigError("label " + std::to_string(l) + " out of range");
    const auto& xv = logits.vec();
    auto probs = std::make_shared<std::vector<T>>(n * c);
    T total = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        const T* row = xv.data() + i * c;
        const T mx = *std::max_element(row, row + c);
        T z = T(0);
        for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
        const T lse = mx + std::log(z);
        total += lse - row[labels[i]];
        for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] = std::exp(row[j] - lse);
    }
    auto sx = logits.storage();
    return detail::finish<T>(Shape{1}, {total / static_cast<T>(n)}, {&logits},
                             [sx, probs, labels, n, c](const std::vector<T>& g) {
                                 auto& gx = sx->grad_buffer();
                                 const T s = g[0] / static_cast<T>(n);
                                 for (std::size_t i = 0; i < n; ++i)
                                     for (std::size_t j = 0; j < c; ++j) {
                                         const T onehot = static_cast<std::size_t>(labels[i]) == j ? T(1) : T(0);
                                         gx[i * c + j] += s * ((*probs)[i * c + j] - onehot);
                                     }
                             });
}

// ---------------------------------------------------------------------------
// Normalization and regularization

/// Normalize over the last axis, then scale by gamma and shift by beta.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
    if (!(eps > T(0))) throw ConfigError("layer_norm eps must be positive");
    const std::size_t d = x.shape().back();
    detail::require(gamma.numel() == d && beta.numel() == d, "layer_norm: affine extent differs from last axis");
    const std::size_t rows = x.numel() / d;
    const auto& xv = x.vec();
    auto xhat = std::make_shared<std::vector<T>>(xv.size());
    auto inv_std = std::make_shared<std::vector<T>>(rows);
    std::vector<T> out(xv.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xv.data() + r * d;
        T mu = T(0);
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<T>(d);
        T var = T(0);
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<T>(d);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const T h = (row[j] - mu) * is;
            (*xhat)[r * d + j] = h;
            out[r * d + j] = h * gamma.vec()[j] + beta.vec()[j];
        }
    }
    auto sx = x.storage(), sg = gamma.storage(), sb = beta.storage();
    return detail::finish<T>(x.shape(), std::move(out), {&x, &gamma, &beta},
                             [sx, sg, sb, xhat, inv_std, rows, d](const std::vector<T>& g) {
                                 if (sg->requires_grad || sb->requires_grad) {
                                     for (std::size_t r = 0; r < rows; ++r)
                                         for (std::size_t j = 0; j < d; ++j) {
                                             if (sg->requires_grad) sg->grad_buffer()[j] += g[r * d + j] * (*xhat)[r * d + j];
                                             if (sb->requires_grad) sb->grad_buffer()[j] += g[r * d + j];
                                         }
                                 }
                                 if (!sx->requires_grad) return;
                                 auto& gx = sx->grad_buffer();
                                 const T inv_d = T(1) / static_cast<T>(d);
                                 for (std::size_t r = 0; r < rows; ++r) {
                                     T s1 = T(0), s2 = T(0);
                                     for (std::size_t j = 0; j < d; ++j) {
                                         const T dh = g[r * d + j] * sg->value[j];
                                         s1 += dh;
                                         s2 += dh * (*xhat)[r * d + j];
                                     }
                                     for (std::size_t j = 0; j < d; ++j) {
                                         const T dh = g[r * d + j] * sg->value[j];
                                         gx[r * d + j] += (*inv_std)[r] * (dh - s1 * inv_d - (*xhat)[r * d + j] * s2 * inv_d);
                                     }
                                 }
                             });
}

/// Per-channel running statistics for batch_norm. Buffers, never trained.
template <class T>
struct RunningStats {
    Tensor<T> mean;
    Tensor<T> var;
    T momentum = T(0.1);

    explicit RunningStats(std::size_t channels = 1)
        : mean(Tensor<T>::zeros({channels})), var(Tensor<T>::full({channels}, T(1))) {}
};

/// Batch normalization over all axes except the channel axis (axis 1) of an
/// [N, C, ...] tensor. Training normalizes by batch statistics (biased
/// variance) and updates running stats with
/// running = (1 - momentum) * running + momentum * batch, using the unbiased
/// batch variance. Eval normalizes by the running stats.
template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, RunningStats<T>& stats,
                     bool training, T eps = T(1e-5)) {
    detail::require(x.rank() >= 2, "batch_norm expects [N, C, ...]");
    const std::size_t n = x.dim(0), c = x.dim(1);
    const std::size_t inner = x.numel() / (n * c);
    detail::require(gamma.numel() == c && beta.numel() == c && stats.mean.numel() == c,
                    "batch_norm: channel extent mismatch");
    if (training && n < 2) throw ConfigError("batch_norm in training mode needs a batch of at least 2");
    const auto& xv = x.vec();
    const std::size_t count = n * inner;
    std::vector<T> mu(c, T(0)), inv_std(c);
    if (training) {
        std::vector<T> var(c, T(0));
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < inner; ++i) mu[ch] += xv[(b * c + ch) * inner + i];
        for (auto& m : mu) m /= static_cast<T>(count);
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t i = 0; i < inner; ++i) {
                    const T dv = xv[(b * c + ch) * inner + i] - mu[ch];
                    var[ch] += dv * dv;
                }
        auto rm = stats.mean.mutable_values();
        auto rv = stats.var.mutable_values();
        for (std::size_t ch = 0; ch < c; ++ch) {
            const T biased = var[ch] / static_cast<T>(count);
            inv_std[ch] = T(1) / std::sqrt(biased + eps);
            const T unbiased = var[ch] / static_cast<T>(count - 1);
            rm[ch] = (T(1) - stats.momentum) * rm[ch] + stats.momentum * mu[ch];
            rv[ch] = (T(1) - stats.momentum) * rv[ch] + stats.momentum * unbiased;
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            mu[ch] = stats.mean.vec()[ch];
            inv_std[ch] = T(1) / std::sqrt(stats.var.vec()[ch] + eps);
        }
    }
    auto xhat = std::make_shared<std::vector<T>>(xv.size());
    std::vector<T> out(xv.size());
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t f = (b * c + ch) * inner + i;
                const T h = (xv[f] - mu[ch]) * inv_std[ch];
                (*xhat)[f] = h;
                out[f] = h * gamma.vec()[ch] + beta.vec()[ch];
            }
    auto sx = x.storage(), sg = gamma.storage(), sb = beta.storage();
    return detail::finish<T>(x.shape(), std::move(out), {&x, &gamma, &beta},
                             [sx, sg, sb, xhat, inv_std, n, c, inner, training, count](const std::vector<T>& g) {
                                 std::vector<T> sum_g(c, T(0)), sum_gh(c, T(0));
                                 for (std::size_t b = 0; b < n; ++b)
                                     for (std::size_t ch = 0; ch < c; ++ch)
                                         for (std::size_t i = 0; i < inner; ++i) {
                                             const std::size_t f = (b * c + ch) * inner + i;
                                             sum_g[ch] += g[f];
                                             sum_gh[ch] += g[f] * (*xhat)[f];
                                         }
                                 if (sg->requires_grad)
                                     for (std::size_t ch = 0; ch < c; ++ch) sg->grad_buffer()[ch] += sum_gh[ch];
                                 if (sb->requires_grad)
                                     for (std::size_t ch = 0; ch < c; ++ch) sb->grad_buffer()[ch] += sum_g[ch];
                                 if (!sx->requires_grad) return;
                                 auto& gx = sx->grad_buffer();
                                 const T inv_m = T(1) / static_cast<T>(count);
                                 for (std::size_t b = 0; b < n; ++b)
                                     for (std::size_t ch = 0; ch < c; ++ch) {
                                         const T gam = sg->value[ch];
                                         for (std::size_t i = 0; i < inner; ++i) {
                                             const std::size_t f = (b * c + ch) * inner + i;
                                             if (training)
                                                 gx[f] += gam * inv_std[ch] *
                                                          (g[f] - sum_g[ch] * inv_m - (*xhat)[f] * sum_gh[ch] * inv_m);
                                             else
                                                 gx[f] += gam * inv_std[ch] * g[f];
                                         }
                                     }
                             });
}

/// Inverted dropout: in training each element is zeroed with probability
/// `rate` and survivors are scaled by 1 / (1 - rate); in eval it is the identity.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Philox* rng, bool training) {
    if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must be in [0, 1), got " + std::to_string(rate));
    if (!training || rate == 0.0) return x;
    if (!rng) throw ConfigError("dropout in training mode needs an RNG");
    const T keep_scale = T(1) / static_cast<T>(1.0 - rate);
    auto mask = std::make_shared<std::vector<T>>(x.numel());
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        (*mask)[i] = rng->uniform() < rate ? T(0) : keep_scale;
        out[i] = x.vec()[i] * (*mask)[i];
    }
    auto sx = x.storage();
    return detail::finish<T>(x.shape(), std::move(out), {&x}, [sx, mask](const std::vector<T>& g) {
        auto& gx = sx->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
    });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

struct Conv2dGeometry {
    std::size_t n, c, h, w, f, kh, kw, stride, pad, oh, ow;
};

inline Conv2dGeometry conv2d_geometry(const Shape& x, const Shape& w, std::size_t stride, std::size_t pad) {
    detail::require(x.size() == 4 && w.size() == 4, "conv2d expects x [N,C,H,W] and w [F,C,kh,kw]");
    detail::require(x[1] == w[1], "conv2d channel mismatch: input " + shape_str(x) + " kernel " + shape_str(w));
    if (stride == 0) throw ConfigError("conv2d stride must be positive");
    Conv2dGeometry g{x[0], x[1], x[2], x[3], w[0], w[2], w[3], stride, pad, 0, 0};
    if (g.kh > g.h + 2 * pad || g.kw > g.w + 2 * pad)
        throw DimensionError("conv2d kernel " + shape_str(w) + " larger than padded input " + shape_str(x));
    g.oh = (g.h + 2 * pad - g.kh) / stride + 1;
    g.ow = (g.w + 2 * pad - g.kw) / stride + 1;
    return g;
}

namespace detail {

// cols is [C*kh*kw, oh*ow] for one image; padded taps are zero.
template <class T>
void im2col(const T* x, const Conv2dGeometry& g, T* cols) {
    const std::size_t hw = g.oh * g.ow;
    for (std::size_t ch = 0; ch < g.c; ++ch)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                T* row = cols + ((ch * g.kh + ky) * g.kw + kx) * hw;
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        row[oy * g.ow + ox] = (iy < 0 || ix < 0 || iy >= static_cast<long>(g.h) || ix >= static_cast<long>(g.w))
                                                  ? T(0)
                                                  : x[(ch * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)];
                    }
                }
            }
}

template <class T>
void col2im(const T* cols, const Conv2dGeometry& g, T* x) {
    const std::size_t hw = g.oh * g.ow;
    for (std::size_t ch = 0; ch < g.c; ++ch)
        for (std::size_t ky = 0; ky < g.kh; ++ky)
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const T* row = cols + ((ch * g.kh + ky) * g.kw + kx) * hw;
                for (std::size_t oy = 0; oy < g.oh; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
                    for (std::size_t ox = 0; ox < g.ow; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
                        x[(ch * g.h + static_cast<std::size_t>(iy)) * g.w + static_cast<std::size_t>(ix)] += row[oy * g.ow + ox];
                    }
                }
            }
}

} // namespace detail

/// Cross-correlation of x [N,C,H,W] with w [F,C,kh,kw]; bias [F] optional.
/// Each output is the sum over (c, ky, kx) in that order, then + bias.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, std::size_t stride = 1,
                 std::size_t padding = 0) {
    const Conv2dGeometry g = conv2d_geometry(x.shape(), w.shape(), stride, padding);
    if (bias.defined()) detail::require(bias.numel() == g.f, "conv2d bias extent");
    const std::size_t k = g.c * g.kh * g.kw, hw = g.oh * g.ow;
    std::vector<T> out(g.n * g.f * hw, T(0));
    std::vector<T> cols(k * hw);
    for (std::size_t b = 0; b < g.n; ++b) {
        detail::im2col(x.vec().data() + b * g.c * g.h * g.w, g, cols.data());
        T* ob = out.data() + b * g.f * hw;
        detail::gemm(w.vec().data(), cols.data(), ob, g.f, k, hw, false, false);
        if (bias.defined())
            for (std::size_t f = 0; f < g.f; ++f)
                for (std::size_t i = 0; i < hw; ++i) ob[f * hw + i] += bias.vec()[f];
    }
    auto sx = x.storage(), sw = w.storage();
    auto sb = bias.defined() ? bias.storage() : nullptr;
    return detail::finish<T>(Shape{g.n, g.f, g.oh, g.ow}, std::move(out), {&x, &w, &bias},
                             [sx, sw, sb, g, k, hw](const std::vector<T>& gout) {
                                 std::vector<T> cols(k * hw), dcols(k * hw);
                                 for (std::size_t b = 0; b < g.n; ++b) {
                                     const T* gb = gout.data() + b * g.f * hw;
                                     if (sw->requires_grad) {
                                         detail::im2col(sx->value.data() + b * g.c * g.h * g.w, g, cols.data());
                                         detail::gemm(gb, cols.data(), sw->grad_buffer().data(), g.f, hw, k, false, true);
                                     }
                                     if (sx->requires_grad) {
                                         std::fill(dcols.begin(), dcols.end(), T(0));
                                         detail::gemm(sw->value.data(), gb, dcols.data(), k, g.f, hw, true, false);
                                         detail::col2im(dcols.data(), g, sx->grad_buffer().data() + b * g.c * g.h * g.w);
                                     }
                                     if (sb && sb->requires_grad)
                                         for (std::size_t f = 0; f < g.f; ++f)
                                             for (std::size_t i = 0; i < hw; ++i) sb->grad_buffer()[f] += gb[f * hw + i];
                                 }
                             });
}

/// Max pooling over k x k windows with the given stride (no padding).
/// Ties resolve to the first element in row-major window order.
template <class T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t k, std::size_t stride) {
    detail::require(x.rank() == 4, "max_pool2d expects [N,C,H,W]");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (k == 0 || stride == 0 || k > h || k > w) throw DimensionError("max_pool2d window does not fit input");
    const std::size_t oh = (h - k) / stride + 1, ow = (w - k) / stride + 1;
    std::vector<T> out(n * c * oh * ow);
    auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
    const auto& xv = x.vec();
    for (std::size_t p = 0; p < n * c; ++p)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                std::size_t best = (p * h + oy * stride) * w + ox * stride;
                for (std::size_t dy = 0; dy < k; ++dy)
                    for (std::size_t dx = 0; dx < k; ++dx) {
                        const std::size_t f = (p * h + oy * stride + dy) * w + ox * stride + dx;
                        if (xv[f] > xv[best]) best = f;
                    }
                const std::size_t o = (p * oh + oy) * ow + ox;
                out[o] = xv[best];
                (*arg)[o] = best;
            }
    auto sx = x.storage();
    return detail::finish<T>(Shape{n, c, oh, ow}, std::move(out), {&x}, [sx, arg](const std::vector<T>& g) {
        auto& gx = sx->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gx[(*arg)[i]] += g[i];
    });
}

/// [N, C, H, W] -> [N, C] spatial mean.
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    detail::require(x.rank() == 4, "global_avg_pool expects [N,C,H,W]");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    std::vector<T> out(n * c, T(0));
    for (std::size_t p = 0; p < n * c; ++p) {
        T acc = T(0);
        for (std::size_t i = 0; i < hw; ++i) acc += x.vec()[p * hw + i];
        out[p] = acc / static_cast<T>(hw);
    }
    auto sx = x.storage();
    return detail::finish<T>(Shape{n, c}, std::move(out), {&x}, [sx, hw](const std::vector<T>& g) {
        auto& gx = sx->grad_buffer();
        const T inv = T(1) / static_cast<T>(hw);
        for (std::size_t p = 0; p < g.size(); ++p)
            for (std::size_t i = 0; i < hw; ++i) gx[p * hw + i] += g[p] * inv;
    });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (shape_numel(shape) != x.numel())
        throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
    auto sx = x.storage();
    return detail::finish<T>(std::move(shape), x.vec(), {&x}, [sx](const std::vector<T>& g) {
        auto& gx = sx->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

/// out.shape[i] = x.shape[perm[i]].
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
    const std::size_t r = x.rank();
    detail::require(perm.size() == r, "permute: permutation rank");
    std::vector<bool> seen(r, false);
    for (auto p : perm) {
        detail::require(p < r && !seen[p], "permute: not a permutation");
        seen[p] = true;
    }
    const Shape& s = x.shape();
    std::vector<std::size_t> in_stride(r);
    std::size_t st = 1;
    for (std::size_t i = r; i-- > 0;) {
        in_stride[i] = st;
        st *= s[i];
    }
    Shape out_shape(r);
    std::vector<std::size_t> stride(r);
    for (std::size_t i = 0; i < r; ++i) {
        out_shape[i] = s[perm[i]];
        stride[i] = in_stride[perm[i]];
    }
    const std::size_t n = x.numel();
    auto src = std::make_shared<std::vector<std::size_t>>(n);
    std::vector<std::size_t> pos(r, 0);
    std::size_t cur = 0;
    for (std::size_t f = 0; f < n; ++f) {
        (*src)[f] = cur;
        for (std::size_t d = r; d-- > 0;) {
            ++pos[d];
            cur += stride[d];
            if (pos[d] < out_shape[d]) break;
            cur -= stride[d] * pos[d];
            pos[d] = 0;
        }
    }
    std::vector<T> out(n);
    for (std::size_t f = 0; f < n; ++f) out[f] = x.vec()[(*src)[f]];
    auto sx = x.storage();
    return detail::finish<T>(out_shape, std::move(out), {&x}, [sx, src](const std::vector<T>& g) {
        auto& gx = sx->grad_buffer();
        for (std::size_t f = 0; f < g.size(); ++f) gx[(*src)[f]] += g[f];
    });
}

/// Cyclic roll: out[i] = x[(i - shift) mod extent] along each listed axis.
template <class T>
Tensor<T> roll(const Tensor<T>& x, const std::vector<long>& shifts, const std::vector<std::size_t>& axes) {
    detail::require(shifts.size() == axes.size(), "roll: shifts/axes length");
    const Shape& s = x.shape();
    const std::size_t r = s.size();
    std::vector<std::size_t> stride(r);
    std::size_t st = 1;
    for (std::size_t i = r; i-- > 0;) {
        stride[i] = st;
        st *= s[i];
    }
    std::vector<long> shift(r, 0);
    for (std::size_t i = 0; i < axes.size(); ++i) {
        detail::require(axes[i] < r, "roll: axis out of range");
        shift[axes[i]] += shifts[i];
    }
    const std::size_t n = x.numel();
    auto src = std::make_shared<std::vector<std::size_t>>(n);
    std::vector<std::size_t> pos(r, 0);
    for (std::size_t f = 0; f < n; ++f) {
        std::size_t idx = 0;
        for (std::size_t d = 0; d < r; ++d) {
            const long ext = static_cast<long>(s[d]);
            long p = (static_cast<long>(pos[d]) - shift[d]) % ext;
            if (p < 0) p += ext;
            idx += static_cast<std::size_t>(p) * stride[d];
        }
        (*src)[f] = idx;
        for (std::size_t d = r; d-- > 0;) {
            if (++pos[d] < s[d]) break;
            pos[d] = 0;
        }
    }
    std::vector<T> out(n);
    for (std::size_t f = 0; f < n; ++f) out[f] = x.vec()[(*src)[f]];
    auto sx = x.storage();
    return detail::finish<T>(s, std::move(out), {&x}, [sx, src](const std::vector<T>& g) {
        auto& gx = sx->grad_buffer();
        for (std::size_t f = 0; f < g.size(); ++f) gx[(*src)[f]] += g[f];
    });
}

/// Concatenate along `axis`; all other extents must agree.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, long axis_in) {
    detail::require(!parts.empty(), "concat of nothing");
    const std::size_t axis = detail::norm_axis(axis_in, parts[0].rank());
    Shape out_shape = parts[0].shape();
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        detail::require(p.rank() == out_shape.size(), "concat: rank mismatch");
        for (std::size_t d = 0; d < out_shape.size(); ++d)
            if (d != axis)
                detail::require(p.dim(d) == parts[0].dim(d), "concat: extent mismatch " + shape_str(p.shape()) + " vs " +
                                                                 shape_str(parts[0].shape()));
        out_shape[axis] += p.dim(axis);
    }
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= out_shape[d];
    for (std::size_t d = axis + 1; d < out_shape.size(); ++d) inner *= out_shape[d];
    const std::size_t total = out_shape[axis];
    std::vector<T> out(shape_numel(out_shape));
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const std::size_t len = p.dim(axis);
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(p.vec().data() + o * len * inner, len * inner, out.data() + (o * total + off) * inner);
        off += len;
    }
    std::vector<detail::StoragePtr<T>> stores;
    for (const auto& p : parts) stores.push_back(p.storage());
    return detail::finish_vec<T>(out_shape, std::move(out), parts,
                                 [stores, offsets, outer, inner, total](const std::vector<T>& g) {
                                     for (std::size_t i = 0; i < stores.size(); ++i) {
                                         if (!stores[i]->requires_grad) continue;
                                         auto& gp = stores[i]->grad_buffer();
                                         const std::size_t len = stores[i]->value.size() / (outer * inner);
                                         for (std::size_t o = 0; o < outer; ++o)
                                             for (std::size_t j = 0; j < len * inner; ++j)
                                                 gp[o * len * inner + j] += g[(o * total + offsets[i]) * inner + j];
                                     }
                                 });
}

/// Contiguous slice [start, start + length) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, long axis_in, std::size_t start, std::size_t length) {
    const std::size_t axis = detail::norm_axis(axis_in, x.rank());
    detail::require(length > 0 && start + length <= x.dim(axis), "slice out of range");
    Shape out_shape = x.shape();
    out_shape[axis] = length;
    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= out_shape[d];
    for (std::size_t d = axis + 1; d < out_shape.size(); ++d) inner *= out_shape[d];
    const std::size_t total = x.dim(axis);
    std::vector<T> out(shape_numel(out_shape));
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(x.vec().data() + (o * total + start) * inner, length * inner, out.data() + o * length * inner);
    auto sx = x.storage();
    return detail::finish<T>(out_shape, std::move(out), {&x}, [sx, outer, inner, total, start, length](const std::vector<T>& g) {
        auto& gx = sx->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t j = 0; j < length * inner; ++j) gx[(o * total + start) * inner + j] += g[o * length * inner + j];
    });
}

/// Gather rows of a [R, ...] tensor: out[i] = x[indices[i]].
template <class T>
Tensor<T> index_rows(const Tensor<T>& x, const std::vector<std::size_t>& indices) {
    detail::require(x.rank() >= 1 && !indices.empty(), "index_rows: bad operands");
    const std::size_t rows = x.dim(0), width = x.numel() / rows;
    for (auto i : indices) detail::require(i < rows, "index_rows: index out of range");
    Shape out_shape = x.shape();
    out_shape[0] = indices.size();
    std::vector<T> out(indices.size() * width);
    for (std::size_t i = 0; i < indices.size(); ++i)
        std::copy_n(x.vec().data() + indices[i] * width, width, out.data() + i * width);
    auto sx = x.storage();
    return detail::finish<T>(out_shape, std::move(out), {&x}, [sx, indices, width](const std::vector<T>& g) {
        auto& gx = sx->grad_buffer();
        for (std::size_t i = 0; i < indices.size(); ++i)
            for (std::size_t j = 0; j < width; ++j) gx[indices[i] * width + j] += g[i * width + j];
    });
}

/// Elementwise numeric cast into a fresh, untracked tensor.
template <class To, class From>
Tensor<To> cast(const Tensor<From>& x) {
    std::vector<To> v(x.numel());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<To>(x.vec()[i]);
    return Tensor<To>(x.shape(), std::move(v));
}

template <class T>
bool all_finite(const Tensor<T>& x) {
    return std::all_of(x.vec().begin(), x.vec().end(), [](T v) { return std::isfinite(v); });
}

} // namespace forgelens
