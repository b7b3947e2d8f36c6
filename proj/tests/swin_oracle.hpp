#pragma once

// Straightforward 64-bit reference for the shifted-window transformer. It
// never partitions, rolls or builds additive masks: every token attends
// directly to the tokens it is allowed to see on the unshifted grid.
//
// With displacement d, a token at (y, x) sits at ((y - d) mod H, (x - d) mod W)
// of the shifted grid. Two tokens may attend to each other iff they land in
// the same shifted window and agree on whether they wrapped around in y
// (y < d) and in x (x < d). The relative position bias uses the in-window
// coordinates on the shifted grid.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "forgelens/swin.hpp"

namespace fl_oracle {

using Grid = std::vector<double>;  // [H][W][C] of one image

template <class T>
std::vector<double> to_double(const forgelens::Tensor<T>& t) {
    return {t.values().begin(), t.values().end()};
}

inline Grid layer_norm_rows(const Grid& x, std::size_t c, const std::vector<double>& g, const std::vector<double>& b) {
    Grid out(x.size());
    for (std::size_t r = 0; r < x.size() / c; ++r) {
        double mu = 0.0, var = 0.0;
        for (std::size_t i = 0; i < c; ++i) mu += x[r * c + i];
        mu /= static_cast<double>(c);
        for (std::size_t i = 0; i < c; ++i) var += (x[r * c + i] - mu) * (x[r * c + i] - mu);
        var /= static_cast<double>(c);
        for (std::size_t i = 0; i < c; ++i) out[r * c + i] = (x[r * c + i] - mu) / std::sqrt(var + 1e-5) * g[i] + b[i];
    }
    return out;
}

/// rows x [in] times W [in, out] plus bias (empty for none).
inline Grid affine_rows(const Grid& x, std::size_t in, const std::vector<double>& w, const std::vector<double>& b, std::size_t out) {
    const std::size_t rows = x.size() / in;
    Grid y(rows * out);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < out; ++o) {
            double acc = b.empty() ? 0.0 : b[o];
            for (std::size_t i = 0; i < in; ++i) acc += x[r * in + i] * w[i * out + o];
            y[r * out + o] = acc;
        }
    return y;
}

inline double gelu_exact(double v) { return 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))); }

template <class T>
Grid linear_rows(const Grid& x, const forgelens::Linear<T>& l) {
    const std::size_t in = l.weight.dim(0), out = l.weight.dim(1);
    return affine_rows(x, in, to_double(l.weight), l.bias.defined() ? to_double(l.bias) : std::vector<double>{}, out);
}

template <class T>
Grid norm_rows(const Grid& x, const forgelens::LayerNorm<T>& n) {
    return layer_norm_rows(x, n.gamma.numel(), to_double(n.gamma), to_double(n.beta));
}

/// Attention weights a token pair may use, or false when the pair is masked.
inline bool may_attend(std::size_t py, std::size_t px, std::size_t qy, std::size_t qx, std::size_t h, std::size_t w,
                       std::size_t win, std::size_t d) {
    const std::size_t spy = (py + h - d) % h, spx = (px + w - d) % w;
    const std::size_t sqy = (qy + h - d) % h, sqx = (qx + w - d) % w;
    if (spy / win != sqy / win || spx / win != sqx / win) return false;
    if (d == 0) return true;
    return (py < d) == (qy < d) && (px < d) == (qx < d);
}

/// Windowed multi-head attention over one image grid [H][W][C], including
/// the output projection, without residual.
template <class T>
Grid dense_window_attention(const Grid& x, std::size_t h, std::size_t w, const forgelens::WindowAttention<T>& attn,
                            std::size_t d) {
    const std::size_t c = attn.dim, heads = attn.heads, hd = c / heads, win = attn.window;
    const Grid qkv = linear_rows(x, attn.qkv);  // [tokens][3C] laid out [3][heads][hd]
    const auto table = to_double(attn.bias_table);
    const std::size_t span = 2 * win - 1;
    Grid concat(h * w * c, 0.0);
    for (std::size_t head = 0; head < heads; ++head)
        for (std::size_t py = 0; py < h; ++py)
            for (std::size_t px = 0; px < w; ++px) {
                const std::size_t p = py * w + px;
                const std::size_t spy = (py + h - d) % h, spx = (px + w - d) % w;
                std::vector<std::pair<std::size_t, double>> logits;
                double mx = -1e300;
                for (std::size_t qy = 0; qy < h; ++qy)
                    for (std::size_t qx = 0; qx < w; ++qx) {
                        if (!may_attend(py, px, qy, qx, h, w, win, d)) continue;
                        const std::size_t q = qy * w + qx;
                        const std::size_t sqy = (qy + h - d) % h, sqx = (qx + w - d) % w;
                        double s = 0.0;
                        for (std::size_t i = 0; i < hd; ++i)
                            s += qkv[p * 3 * c + head * hd + i] * qkv[q * 3 * c + c + head * hd + i];
                        s /= std::sqrt(static_cast<double>(hd));
                        const std::size_t dy = spy % win + win - 1 - sqy % win;
                        const std::size_t dx = spx % win + win - 1 - sqx % win;
                        s += table[(dy * span + dx) * heads + head];
                        logits.emplace_back(q, s);
                        mx = std::max(mx, s);
                    }
                double z = 0.0;
                for (auto& [q, s] : logits) z += std::exp(s - mx);
                for (auto& [q, s] : logits) {
                    const double a = std::exp(s - mx) / z;
                    for (std::size_t i = 0; i < hd; ++i) concat[p * c + head * hd + i] += a * qkv[q * 3 * c + 2 * c + head * hd + i];
                }
            }
    return linear_rows(concat, attn.proj);
}

/// One transformer block: x + attn(LN1 x), then + MLP(LN2 .).
template <class T>
Grid dense_block(const Grid& x, std::size_t h, std::size_t w, const forgelens::SwinBlock<T>& blk) {
    const std::size_t c = blk.attn.dim;
    const Grid a = dense_window_attention(norm_rows(x, blk.norm1), h, w, blk.attn, blk.shift);
    Grid r(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) r[i] = x[i] + a[i];
    Grid m = linear_rows(norm_rows(r, blk.norm2), blk.fc1);
    for (auto& v : m) v = gelu_exact(v);
    m = linear_rows(m, blk.fc2);
    for (std::size_t i = 0; i < r.size(); ++i) r[i] += m[i];
    (void)c;
    return r;
}

/// Block applied to every image of an [N, H, W, C] tensor.
template <class T>
std::vector<double> dense_block_batch(const forgelens::Tensor<T>& x, const forgelens::SwinBlock<T>& blk) {
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    std::vector<double> out;
    const auto all = to_double(x);
    for (std::size_t b = 0; b < n; ++b) {
        const Grid g(all.begin() + static_cast<std::ptrdiff_t>(b * h * w * c), all.begin() + static_cast<std::ptrdiff_t>((b + 1) * h * w * c));
        const Grid y = dense_block(g, h, w, blk);
        out.insert(out.end(), y.begin(), y.end());
    }
    return out;
}

template <class T>
std::vector<double> param(const forgelens::ParameterSet<T>& ps, const std::string& name) {
    return to_double(ps.find(name).tensor);
}

/// Logits of a whole SwinModel for one image [3][S][S], computed densely.
template <class T>
std::vector<double> dense_swin_logits(const forgelens::SwinModel<T>& model, const std::vector<double>& img) {
    const auto& cfg = model.config();
    const auto& ps = model.parameters();
    const std::size_t s = cfg.image_size, p = cfg.patch_size, c0 = cfg.embed_dim;
    std::size_t g = s / p;
    // Patch embedding: one P x P patch per token.
    const auto pw = param(ps, "patch_embed.proj.weight");
    const auto pb = param(ps, "patch_embed.proj.bias");
    Grid x(g * g * c0);
    for (std::size_t ty = 0; ty < g; ++ty)
        for (std::size_t tx = 0; tx < g; ++tx)
            for (std::size_t o = 0; o < c0; ++o) {
                double acc = 0.0;
                for (std::size_t ch = 0; ch < 3; ++ch)
                    for (std::size_t ky = 0; ky < p; ++ky)
                        for (std::size_t kx = 0; kx < p; ++kx)
                            acc += img[(ch * s + ty * p + ky) * s + tx * p + kx] * pw[((o * 3 + ch) * p + ky) * p + kx];
                x[(ty * g + tx) * c0 + o] = acc + pb[o];
            }
    std::size_t c = c0;
    for (std::size_t st = 0; st < cfg.depths.size(); ++st) {
        if (st > 0) {
            const std::string m = "stage" + std::to_string(st - 1) + ".merge";
            const std::size_t g2 = g / 2;
            Grid cat(g2 * g2 * 4 * c);
            for (std::size_t i = 0; i < g2; ++i)
                for (std::size_t j = 0; j < g2; ++j) {
                    const std::size_t src[4][2] = {{2 * i, 2 * j}, {2 * i, 2 * j + 1}, {2 * i + 1, 2 * j}, {2 * i + 1, 2 * j + 1}};
                    for (std::size_t k = 0; k < 4; ++k)
                        for (std::size_t ch = 0; ch < c; ++ch)
                            cat[(i * g2 + j) * 4 * c + k * c + ch] = x[(src[k][0] * g + src[k][1]) * c + ch];
                }
            cat = layer_norm_rows(cat, 4 * c, param(ps, m + ".norm.gamma"), param(ps, m + ".norm.beta"));
            x = affine_rows(cat, 4 * c, param(ps, m + ".reduction.weight"), {}, 2 * c);
            c *= 2;
            g = g2;
        }
        for (std::size_t b = 0; b < cfg.depths[st]; ++b) x = dense_block(x, g, g, model.block(st, b));
    }
    std::vector<double> pooled(c, 0.0);
    for (std::size_t t = 0; t < g * g; ++t)
        for (std::size_t ch = 0; ch < c; ++ch) pooled[ch] += x[t * c + ch];
    for (auto& v : pooled) v /= static_cast<double>(g * g);
    pooled = layer_norm_rows(pooled, c, param(ps, "head.norm.gamma"), param(ps, "head.norm.beta"));
    return affine_rows(pooled, c, param(ps, "head.fc.weight"), param(ps, "head.fc.bias"), 2);
}

} // namespace fl_oracle
