#pragma once

// Shifted-window transformer backbone at toy scale.
//
// Token grids are kept as [N, H, W, C]. Windows are square, w = min(W, grid),
// and odd-indexed blocks of a stage shift by floor(w / 2) when the grid is
// strictly larger than the window.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"

#include "forgelens/core/error.hpp"
#include "forgelens/core/hash.hpp"
#include "forgelens/core/rng.hpp"
#include "forgelens/nn.hpp"
#include "forgelens/ops.hpp"

namespace forgelens {

/// Logit added to attention pairs that must not interact.
inline constexpr double kMaskedLogit = -1e9;

struct SwinConfig {
    std::size_t image_size = 64;
    std::size_t patch_size = 4;
    std::size_t embed_dim = 32;
    std::vector<std::size_t> depths{2, 2};
    std::vector<std::size_t> heads{2, 4};
    std::size_t window_size = 4;
    std::size_t mlp_ratio = 2;
    double dropout = 0.1;

    static SwinConfig toy() { return {}; }

    static SwinConfig tiny() {
        SwinConfig c;
        c.image_size = 224;
        c.embed_dim = 96;
        c.depths = {2, 2, 6, 2};
        c.heads = {3, 6, 12, 24};
        c.window_size = 7;
        c.mlp_ratio = 4;
        return c;
    }

    std::size_t grid(std::size_t stage) const { return (image_size / patch_size) >> stage; }
    std::size_t dim(std::size_t stage) const { return embed_dim << stage; }
    std::size_t window(std::size_t stage) const { return std::min(window_size, grid(stage)); }
    std::size_t shift(std::size_t stage) const { return grid(stage) > window_size ? window_size / 2 : 0; }
    std::size_t final_dim() const { return dim(depths.size() - 1); }

    void validate() const {
        if (patch_size == 0 || image_size == 0 || embed_dim == 0 || window_size == 0 || mlp_ratio == 0)
            throw ConfigError("swin: sizes must be positive");
        if (image_size % patch_size != 0)
            throw ConfigError("swin: image_size " + std::to_string(image_size) + " not divisible by patch_size " +
                              std::to_string(patch_size));
        if (depths.empty() || depths.size() != heads.size()) throw ConfigError("swin: depths and heads must be non-empty and equal length");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("swin: dropout must be in [0, 1)");
        std::size_t g = image_size / patch_size;
        for (std::size_t s = 0; s < depths.size(); ++s) {
            if (depths[s] == 0 || heads[s] == 0) throw ConfigError("swin: stage depth and heads must be positive");
            if (s > 0) {
                if (g % 2 != 0) throw ConfigError("swin: stage " + std::to_string(s) + " needs an even grid to merge");
                g /= 2;
            }
            const std::size_t w = std::min(window_size, g);
            if (g % w != 0)
                throw ConfigError("swin: stage " + std::to_string(s) + " grid " + std::to_string(g) +
                                  " not divisible by window " + std::to_string(w));
            if (dim(s) % heads[s] != 0)
                throw ConfigError("swin: heads " + std::to_string(heads[s]) + " do not divide dim " + std::to_string(dim(s)));
        }
    }

    nlohmann::json to_json() const {
        return {{"arch", "swin"},          {"image_size", image_size}, {"patch_size", patch_size},
                {"embed_dim", embed_dim},  {"depths", depths},         {"heads", heads},
                {"window_size", window_size}, {"mlp_ratio", mlp_ratio}, {"dropout", dropout}};
    }

    static SwinConfig from_json(const nlohmann::json& j) {
        SwinConfig c = j.contains("preset") && j.at("preset") == "tiny" ? tiny() : toy();
        if (j.contains("image_size")) c.image_size = j.at("image_size");
        if (j.contains("patch_size")) c.patch_size = j.at("patch_size");
        if (j.contains("embed_dim")) c.embed_dim = j.at("embed_dim");
        if (j.contains("depths")) c.depths = j.at("depths").get<std::vector<std::size_t>>();
        if (j.contains("heads")) c.heads = j.at("heads").get<std::vector<std::size_t>>();
        if (j.contains("window_size")) c.window_size = j.at("window_size");
        if (j.contains("mlp_ratio")) c.mlp_ratio = j.at("mlp_ratio");
        if (j.contains("dropout")) c.dropout = j.at("dropout");
        c.validate();
        return c;
    }
};

// ---------------------------------------------------------------------------
// Token-grid primitives

/// [N, H, W, C] -> [N * (H/w) * (W/w), w*w, C]; windows in row-major grid
/// order, tokens row-major inside each window.
template <class T>
Tensor<T> window_partition(const Tensor<T>& x, std::size_t w) {
    detail::require(x.rank() == 4, "window_partition expects [N,H,W,C]");
    const std::size_t n = x.dim(0), h = x.dim(1), wd = x.dim(2), c = x.dim(3);
    if (w == 0 || h % w != 0 || wd % w != 0)
        throw DimensionError("window " + std::to_string(w) + " does not tile grid " + std::to_string(h) + "x" + std::to_string(wd));
    auto t = reshape(x, {n, h / w, w, wd / w, w, c});
    t = permute(t, {0, 1, 3, 2, 4, 5});
    return reshape(t, {n * (h / w) * (wd / w), w * w, c});
}

/// Exact inverse of window_partition.
template <class T>
Tensor<T> window_reverse(const Tensor<T>& windows, std::size_t w, std::size_t n, std::size_t h, std::size_t wd) {
    detail::require(windows.rank() == 3 && w > 0 && h % w == 0 && wd % w == 0, "window_reverse: bad geometry");
    const std::size_t c = windows.dim(2);
    detail::require(windows.dim(0) == n * (h / w) * (wd / w) && windows.dim(1) == w * w, "window_reverse: window count");
    auto t = reshape(windows, {n, h / w, wd / w, w, w, c});
    t = permute(t, {0, 1, 3, 2, 4, 5});
    return reshape(t, {n, h, wd, c});
}

/// Toroidal roll of an [N, H, W, C] grid by (-d, -d); d < 0 rolls back.
template <class T>
Tensor<T> cyclic_shift(const Tensor<T>& x, long d) {
    detail::require(x.rank() == 4, "cyclic_shift expects [N,H,W,C]");
    if (d == 0) return x;
    return roll(x, {-d, -d}, {1, 2});
}

/// Region id of each cell of an H x W grid after a (-d, -d) shift: cells that
/// wrapped around belong to different regions than those that did not.
inline std::vector<int> shift_region_ids(std::size_t h, std::size_t wd, std::size_t w, std::size_t d) {
    auto band = [&](std::size_t i, std::size_t extent) { return i < extent - w ? 0 : (i < extent - d ? 1 : 2); };
    std::vector<int> ids(h * wd);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < wd; ++x) ids[y * wd + x] = band(y, h) * 3 + band(x, wd);
    return ids;
}

/// [nW, w*w, w*w] additive mask: 0 where two tokens of a shifted window share
/// a region, kMaskedLogit otherwise. All zeros when d == 0.
template <class T>
Tensor<T> build_shift_mask(std::size_t h, std::size_t wd, std::size_t w, std::size_t d) {
    if (w == 0 || h % w != 0 || wd % w != 0) throw DimensionError("build_shift_mask: window does not tile grid");
    if (d >= w) throw ConfigError("shift displacement must be smaller than the window");
    const std::size_t nwy = h / w, nwx = wd / w, l = w * w;
    std::vector<T> m(nwy * nwx * l * l, T(0));
    if (d > 0) {
        const auto ids = shift_region_ids(h, wd, w, d);
        for (std::size_t wy = 0; wy < nwy; ++wy)
            for (std::size_t wx = 0; wx < nwx; ++wx) {
                const std::size_t win = wy * nwx + wx;
                for (std::size_t i = 0; i < l; ++i)
                    for (std::size_t j = 0; j < l; ++j) {
                        const int ri = ids[(wy * w + i / w) * wd + wx * w + i % w];
                        const int rj = ids[(wy * w + j / w) * wd + wx * w + j % w];
                        if (ri != rj) m[(win * l + i) * l + j] = static_cast<T>(kMaskedLogit);
                    }
            }
    }
    return Tensor<T>({nwy * nwx, l, l}, std::move(m));
}

/// Index into the (2w-1)^2 bias table for every ordered token pair of a window:
/// (dy + w - 1) * (2w - 1) + (dx + w - 1), with d = coord(i) - coord(j).
inline std::vector<std::size_t> relative_position_index(std::size_t w) {
    const std::size_t l = w * w, span = 2 * w - 1;
    std::vector<std::size_t> idx(l * l);
    for (std::size_t i = 0; i < l; ++i)
        for (std::size_t j = 0; j < l; ++j) {
            const std::size_t dy = i / w + w - 1 - j / w;
            const std::size_t dx = i % w + w - 1 - j % w;
            idx[i * l + j] = dy * span + dx;
        }
    return idx;
}

// ---------------------------------------------------------------------------
// Layers

template <class T>
struct WindowAttention {
    std::size_t dim = 0, heads = 1, window = 1;
    Linear<T> qkv;     // dim -> 3 dim, output laid out as [3, heads, head_dim]
    Linear<T> proj;    // dim -> dim
    Tensor<T> bias_table;  // [(2w-1)^2, heads]
    std::vector<std::size_t> rel_index;

    WindowAttention() = default;
    WindowAttention(std::size_t dim_, std::size_t heads_, std::size_t window_, Philox& rng)
        : dim(dim_), heads(heads_), window(window_) {
        if (heads == 0 || dim % heads != 0)
            throw ConfigError("attention heads " + std::to_string(heads) + " do not divide dim " + std::to_string(dim));
        qkv = Linear<T>(dim, 3 * dim, true, rng);
        proj = Linear<T>(dim, dim, true, rng);
        bias_table = init::trunc_normal<T>({(2 * window - 1) * (2 * window - 1), heads}, 0.02, rng);
        rel_index = relative_position_index(window);
    }

    /// windows: [B, w*w, dim] with B = batch * nW. mask: [nW, w*w, w*w] or
    /// undefined. When `weights` is non-null it receives the softmax
    /// probabilities as [B, heads, w*w, w*w].
    Tensor<T> operator()(const Tensor<T>& windows, const Tensor<T>& mask, Tensor<T>* weights = nullptr) const {
        const std::size_t l = window * window;
        if (windows.rank() != 3 || windows.dim(1) != l || windows.dim(2) != dim)
            throw ConfigError("window_attention: expected [B," + std::to_string(l) + "," + std::to_string(dim) + "], got " +
                              shape_str(windows.shape()));
        const std::size_t b = windows.dim(0), hd = dim / heads;
        auto t = reshape(qkv(windows), {b, l, 3, heads, hd});
        t = permute(t, {2, 0, 3, 1, 4});  // [3, B, heads, l, hd]
        auto part = [&](std::size_t i) { return reshape(slice(t, 0, i, 1), {b * heads, l, hd}); };
        const auto q = scale(part(0), T(1) / std::sqrt(static_cast<T>(hd)));
        const auto k = part(1);
        const auto v = part(2);
        auto scores = reshape(bmm(q, k, true), {b, heads, l, l});
        auto bias = reshape(permute(index_rows(bias_table, rel_index), {1, 0}), {heads, l, l});
        scores = add(scores, bias);
        if (mask.defined()) {
            const std::size_t nw = mask.dim(0);
            if (b % nw != 0) throw DimensionError("window_attention: batch not a multiple of mask windows");
            scores = reshape(scores, {b / nw, nw, heads, l, l});
            scores = add(scores, reshape(mask, {nw, 1, l, l}));
            scores = reshape(scores, {b, heads, l, l});
        }
        const auto attn = softmax(scores, -1);
        if (weights) *weights = attn;
        auto out = bmm(reshape(attn, {b * heads, l, l}), v);
        out = permute(reshape(out, {b, heads, l, hd}), {0, 2, 1, 3});
        return proj(reshape(out, {b, l, dim}));
    }

    void collect(ParameterSet<T>& ps, const std::string& name, const std::string& group) const {
        qkv.collect(ps, name + ".qkv", group);
        proj.collect(ps, name + ".proj", group);
        ps.add(name + ".rel_bias", group, bias_table);
    }
};

template <class T>
struct SwinBlock {
    std::size_t window = 1, shift = 0;
    LayerNorm<T> norm1, norm2;
    WindowAttention<T> attn;
    Linear<T> fc1, fc2;
    Tensor<T> mask;  // undefined when shift == 0

    SwinBlock() = default;
    SwinBlock(std::size_t dim, std::size_t heads, std::size_t grid, std::size_t window_, std::size_t shift_,
              std::size_t mlp_ratio, Philox& rng)
        : window(window_), shift(shift_), norm1(dim), norm2(dim) {
        attn = WindowAttention<T>(dim, heads, window, rng);
        fc1 = Linear<T>(dim, dim * mlp_ratio, true, rng);
        fc2 = Linear<T>(dim * mlp_ratio, dim, true, rng);
        if (shift > 0) mask = build_shift_mask<T>(grid, grid, window, shift);
    }

    /// x: [N, H, W, C].
    Tensor<T> operator()(const Tensor<T>& x) const {
        const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2);
        auto y = cyclic_shift(norm1(x), static_cast<long>(shift));
        y = window_reverse(attn(window_partition(y, window), mask), window, n, h, w);
        y = cyclic_shift(y, -static_cast<long>(shift));
        const auto r = add(x, y);
        return add(r, fc2(gelu(fc1(norm2(r)))));
    }

    void collect(ParameterSet<T>& ps, const std::string& name, const std::string& group) const {
        norm1.collect(ps, name + ".norm1", group);
        attn.collect(ps, name + ".attn", group);
        norm2.collect(ps, name + ".norm2", group);
        fc1.collect(ps, name + ".mlp.fc1", group);
        fc2.collect(ps, name + ".mlp.fc2", group);
    }
};

/// [N, H, W, C] -> [N, H/2, W/2, 4C] with each 2x2 neighbourhood laid out
/// as top-left, top-right, bottom-left, bottom-right.
template <class T>
Tensor<T> gather_2x2(const Tensor<T>& x) {
    detail::require(x.rank() == 4, "patch merging expects [N,H,W,C]");
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    if (h % 2 != 0 || w % 2 != 0) throw DimensionError("patch merging needs an even grid, got " + shape_str(x.shape()));
    auto t = reshape(x, {n, h / 2, 2, w / 2, 2, c});
    t = permute(t, {0, 1, 3, 2, 4, 5});
    return reshape(t, {n, h / 2, w / 2, 4 * c});
}

template <class T>
struct PatchMerging {
    LayerNorm<T> norm;      // over 4C
    Linear<T> reduction;    // 4C -> 2C, no bias

    PatchMerging() = default;
    PatchMerging(std::size_t dim, Philox& rng) : norm(4 * dim), reduction(4 * dim, 2 * dim, false, rng) {}

    Tensor<T> operator()(const Tensor<T>& x) const { return reduction(norm(gather_2x2(x))); }

    void collect(ParameterSet<T>& ps, const std::string& name, const std::string& group) const {
        norm.collect(ps, name + ".norm", group);
        reduction.collect(ps, name + ".reduction", group);
    }
};

// ---------------------------------------------------------------------------
// Model

template <class T>
class SwinModel : public Model<T> {
public:
    SwinModel(SwinConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Philox rng(derive_seed(seed, "swin"));
        patch_embed_ = Conv2d<T>(3, cfg_.embed_dim, cfg_.patch_size, cfg_.patch_size, 0, true, rng,
                                 InitScheme::trunc_normal_002);
        patch_embed_.collect(params_, "patch_embed.proj", "patch_embed");
        for (std::size_t s = 0; s < cfg_.depths.size(); ++s) {
            if (s > 0) {
                merges_.emplace_back(cfg_.dim(s - 1), rng);
                merges_.back().collect(params_, stage_name(s - 1) + ".merge", stage_name(s - 1) + ".merge");
            }
            std::vector<SwinBlock<T>> blocks;
            for (std::size_t b = 0; b < cfg_.depths[s]; ++b) {
                const std::size_t shift = b % 2 == 1 ? cfg_.shift(s) : 0;
                blocks.emplace_back(cfg_.dim(s), cfg_.heads[s], cfg_.grid(s), cfg_.window(s), shift, cfg_.mlp_ratio, rng);
                const std::string name = stage_name(s) + ".block" + std::to_string(b);
                blocks.back().collect(params_, name, name);
            }
            stages_.push_back(std::move(blocks));
        }
        head_norm_ = LayerNorm<T>(cfg_.final_dim());
        head_fc_ = Linear<T>(cfg_.final_dim(), 2, true, rng);
        head_norm_.collect(params_, "head.norm", "head");
        head_fc_.collect(params_, "head.fc", "head");
    }

    const SwinConfig& config() const { return cfg_; }

    /// x: [N, 3, S, S] -> patch tokens [N, S/P, S/P, C].
    Tensor<T> patch_embed(const Tensor<T>& x) const {
        check_input(x);
        return permute(patch_embed_(x), {0, 2, 3, 1});
    }

    const SwinBlock<T>& block(std::size_t stage, std::size_t index) const { return stages_.at(stage).at(index); }

    /// Backbone without the head: final tokens and their mean.
    ModelOutput<T> encode(const Tensor<T>& x) const {
        auto t = patch_embed(x);
        for (std::size_t s = 0; s < stages_.size(); ++s) {
            if (s > 0) t = merges_[s - 1](t);
            for (const auto& blk : stages_[s]) t = blk(t);
        }
        const std::size_t n = t.dim(0), g = t.dim(1), c = t.dim(3);
        ModelOutput<T> out;
        out.tokens = reshape(t, {n, g * g, c});
        out.features = mean_axis(out.tokens, 1);
        return out;
    }

    ModelOutput<T> forward(const Tensor<T>& x, const ForwardContext& ctx) override {
        auto out = encode(x);
        out.logits = head_fc_(dropout(head_norm_(out.features), cfg_.dropout, ctx.rng, ctx.training()));
        return out;
    }

    const ParameterSet<T>& parameters() const override { return params_; }
    nlohmann::json config_json() const override { return cfg_.to_json(); }
    std::size_t image_size() const override { return cfg_.image_size; }
    std::size_t feature_dim() const override { return cfg_.final_dim(); }

private:
    static std::string stage_name(std::size_t s) { return "stage" + std::to_string(s); }

    void check_input(const Tensor<T>& x) const {
        const Shape want{x.rank() == 4 ? x.dim(0) : 0, 3, cfg_.image_size, cfg_.image_size};
        if (x.rank() != 4 || x.shape() != want)
            throw ConfigError("swin expects [N,3," + std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.image_size) +
                              "], got " + shape_str(x.shape()));
    }

    SwinConfig cfg_;
    Conv2d<T> patch_embed_;
    std::vector<std::vector<SwinBlock<T>>> stages_;
    std::vector<PatchMerging<T>> merges_;
    LayerNorm<T> head_norm_;
    Linear<T> head_fc_;
    ParameterSet<T> params_;
};

} // namespace forgelens
