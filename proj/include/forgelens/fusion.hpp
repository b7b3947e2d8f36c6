#pragma once

// Transformer/CNN feature fusion and the hybrid classifier built on it.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "json.hpp"

#include "forgelens/conv.hpp"
#include "forgelens/core/error.hpp"
#include "forgelens/core/hash.hpp"
#include "forgelens/nn.hpp"
#include "forgelens/ops.hpp"
#include "forgelens/swin.hpp"

namespace forgelens {

enum class FusionMode { concat, cross_attention };
enum class QueryStream { swin, cnn };

inline FusionMode parse_fusion_mode(const std::string& s) {
    if (s == "concat") return FusionMode::concat;
    if (s == "cross_attention") return FusionMode::cross_attention;
    throw ConfigError("unknown fusion mode '" + s + "' (expected concat or cross_attention)");
}

inline std::string to_string(FusionMode m) { return m == FusionMode::concat ? "concat" : "cross_attention"; }

inline QueryStream parse_query_stream(const std::string& s) {
    if (s == "swin") return QueryStream::swin;
    if (s == "cnn") return QueryStream::cnn;
    throw ConfigError("unknown query stream '" + s + "' (expected swin or cnn)");
}

inline std::string to_string(QueryStream q) { return q == QueryStream::swin ? "swin" : "cnn"; }

struct FusionConfig {
    FusionMode mode = FusionMode::cross_attention;
    std::size_t shared_dim = 32;
    std::size_t heads = 2;
    double dropout = 0.1;
    QueryStream query = QueryStream::swin;

    void validate() const {
        if (shared_dim == 0 || heads == 0) throw ConfigError("fusion: shared_dim and heads must be positive");
        if (mode == FusionMode::cross_attention && shared_dim % heads != 0)
            throw ConfigError("fusion: heads " + std::to_string(heads) + " do not divide shared_dim " + std::to_string(shared_dim));
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("fusion: dropout must be in [0, 1)");
    }

    nlohmann::json to_json() const {
        return {{"mode", to_string(mode)}, {"shared_dim", shared_dim}, {"heads", heads}, {"dropout", dropout},
                {"query_stream", to_string(query)}};
    }

    static FusionConfig from_json(const nlohmann::json& j) {
        FusionConfig c;
        if (j.contains("mode")) c.mode = parse_fusion_mode(j.at("mode").get<std::string>());
        if (j.contains("shared_dim")) c.shared_dim = j.at("shared_dim");
        if (j.contains("heads")) c.heads = j.at("heads");
        if (j.contains("dropout")) c.dropout = j.at("dropout");
        if (j.contains("query_stream")) c.query = parse_query_stream(j.at("query_stream").get<std::string>());
        c.validate();
        return c;
    }
};

/// [N, Da] and [N, Db] -> [N, Da + Db], first operand first.
template <class T>
Tensor<T> concat_fuse(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0))
        throw DimensionError("concat_fuse: batch mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    return concat<T>({a, b}, 1);
}

/// Multi-head attention from one token stream onto another, wrapped as
/// layer_norm(q + attention(q, kv)). Both inputs are already in shared_dim.
template <class T>
struct CrossAttention {
    std::size_t dim = 0, heads = 1;
    Linear<T> wq, wk, wv, wo;
    LayerNorm<T> norm;

    CrossAttention() = default;
    CrossAttention(std::size_t dim_, std::size_t heads_, Philox& rng) : dim(dim_), heads(heads_), norm(dim_) {
        if (heads == 0 || dim % heads != 0) throw ConfigError("cross attention heads must divide shared_dim");
        wq = Linear<T>(dim, dim, true, rng);
        wk = Linear<T>(dim, dim, true, rng);
        wv = Linear<T>(dim, dim, true, rng);
        wo = Linear<T>(dim, dim, true, rng);
    }

    /// q: [N, Tq, D], kv: [N, Tk, D]. Returns attention(q, kv) after the output
    /// projection, without residual or norm. `weights` receives [N, heads, Tq, Tk].
    Tensor<T> attend(const Tensor<T>& q, const Tensor<T>& kv, Tensor<T>* weights = nullptr) const {
        if (q.rank() != 3 || kv.rank() != 3 || q.dim(2) != dim || kv.dim(2) != dim || q.dim(0) != kv.dim(0))
            throw ConfigError("cross attention expects [N,Tq," + std::to_string(dim) + "] and [N,Tk," + std::to_string(dim) +
                              "], got " + shape_str(q.shape()) + " and " + shape_str(kv.shape()));
        const std::size_t n = q.dim(0), tq = q.dim(1), tk = kv.dim(1), hd = dim / heads;
        auto split = [&](const Tensor<T>& t, std::size_t len) {
            return reshape(permute(reshape(t, {n, len, heads, hd}), {0, 2, 1, 3}), {n * heads, len, hd});
        };
        const auto qh = scale(split(wq(q), tq), T(1) / std::sqrt(static_cast<T>(hd)));
        const auto kh = split(wk(kv), tk);
        const auto vh = split(wv(kv), tk);
        const auto attn = softmax(bmm(qh, kh, true), -1);
        if (weights) *weights = reshape(attn, {n, heads, tq, tk});
        auto out = permute(reshape(bmm(attn, vh), {n, heads, tq, hd}), {0, 2, 1, 3});
        return wo(reshape(out, {n, tq, dim}));
    }

    Tensor<T> operator()(const Tensor<T>& q, const Tensor<T>& kv, Tensor<T>* weights = nullptr) const {
        return norm(add(q, attend(q, kv, weights)));
    }

    void collect(ParameterSet<T>& ps, const std::string& name, const std::string& group) const {
        wq.collect(ps, name + ".wq", group);
        wk.collect(ps, name + ".wk", group);
        wv.collect(ps, name + ".wv", group);
        wo.collect(ps, name + ".wo", group);
        norm.collect(ps, name + ".norm", group);
    }
};

/// cross_attention_fuse over adapted streams: q_tokens attend to kv_tokens.
template <class T>
Tensor<T> cross_attention_fuse(const Tensor<T>& q_tokens, const Tensor<T>& kv_tokens, const CrossAttention<T>& params,
                               Tensor<T>* weights = nullptr) {
    return params(q_tokens, kv_tokens, weights);
}

struct HybridConfig {
    SwinConfig swin;
    ConvConfig cnn;
    FusionConfig fusion;

    void validate() const {
        swin.validate();
        cnn.validate();
        fusion.validate();
        if (swin.image_size != cnn.image_size)
            throw ConfigError("hybrid: swin image_size " + std::to_string(swin.image_size) + " differs from cnn image_size " +
                              std::to_string(cnn.image_size));
    }

    nlohmann::json to_json() const {
        return {{"arch", "hybrid"}, {"swin", swin.to_json()}, {"cnn", cnn.to_json()}, {"fusion", fusion.to_json()}};
    }

    static HybridConfig from_json(const nlohmann::json& j) {
        HybridConfig c;
        c.swin = SwinConfig::from_json(j.value("swin", nlohmann::json::object()));
        nlohmann::json cj = j.value("cnn", nlohmann::json{{"arch", "resnet_lite"}});
        if (!cj.contains("arch")) cj["arch"] = "resnet_lite";
        if (!cj.contains("image_size")) cj["image_size"] = c.swin.image_size;
        c.cnn = ConvConfig::from_json(cj);
        c.fusion = FusionConfig::from_json(j.value("fusion", nlohmann::json::object()));
        c.validate();
        return c;
    }
};

/// Swin and CNN backbones on the same batch, fused, then
/// layer_norm -> dropout -> linear. The backbones' own heads are not used and
/// not registered.
template <class T>
class HybridModel : public Model<T> {
public:
    HybridModel(HybridConfig cfg, std::uint64_t seed)
        : cfg_(std::move(cfg)), swin_(cfg_.swin, derive_seed(seed, "hybrid.swin")),
          cnn_(cfg_.cnn, derive_seed(seed, "hybrid.cnn")) {
        cfg_.validate();
        Philox rng(derive_seed(seed, "hybrid.fusion"));
        params_.merge(swin_.parameters(), "swin.", "head");
        params_.merge(cnn_.parameters(), "cnn.", "head");
        const std::size_t ds = cfg_.swin.final_dim();
        const std::size_t dc = cnn_channels();
        if (cfg_.fusion.mode == FusionMode::cross_attention) {
            const bool swin_q = cfg_.fusion.query == QueryStream::swin;
            q_adapter_ = Linear<T>(swin_q ? ds : dc, cfg_.fusion.shared_dim, true, rng);
            kv_adapter_ = Linear<T>(swin_q ? dc : ds, cfg_.fusion.shared_dim, true, rng);
            xattn_ = CrossAttention<T>(cfg_.fusion.shared_dim, cfg_.fusion.heads, rng);
            q_adapter_.collect(params_, "fusion.q_adapter", "fusion");
            kv_adapter_.collect(params_, "fusion.kv_adapter", "fusion");
            xattn_.collect(params_, "fusion.xattn", "fusion");
        }
        const std::size_t df = fused_dim();
        head_norm_ = LayerNorm<T>(df);
        head_fc_ = Linear<T>(df, 2, true, rng);
        head_norm_.collect(params_, "head.norm", "head");
        head_fc_.collect(params_, "head.fc", "head");
    }

    std::size_t fused_dim() const {
        return cfg_.fusion.mode == FusionMode::concat ? cfg_.swin.final_dim() + cfg_.cnn.feature_dim() : cfg_.fusion.shared_dim;
    }

    ModelOutput<T> forward(const Tensor<T>& x, const ForwardContext& ctx) override {
        const auto s = swin_.encode(x);
        const auto c = cnn_.encode(x, ctx);
        ModelOutput<T> out;
        if (cfg_.fusion.mode == FusionMode::concat) {
            out.features = concat_fuse(s.features, c.features);
        } else {
            const bool swin_q = cfg_.fusion.query == QueryStream::swin;
            const auto q = q_adapter_(swin_q ? s.tokens : c.tokens);
            const auto kv = kv_adapter_(swin_q ? c.tokens : s.tokens);
            out.tokens = cross_attention_fuse(q, kv, xattn_);
            out.features = mean_axis(out.tokens, 1);
        }
        out.logits = head_fc_(dropout(head_norm_(out.features), cfg_.fusion.dropout, ctx.rng, ctx.training()));
        return out;
    }

    const ParameterSet<T>& parameters() const override { return params_; }
    nlohmann::json config_json() const override { return cfg_.to_json(); }
    std::size_t image_size() const override { return cfg_.swin.image_size; }
    std::size_t feature_dim() const override { return fused_dim(); }

    SwinModel<T>& swin() { return swin_; }
    ConvModel<T>& cnn() { return cnn_; }

private:
    std::size_t cnn_channels() const {
        return cfg_.cnn.variant == ConvVariant::resnet_lite ? cfg_.cnn.feature_dim() : 2 * cfg_.cnn.base();
    }

    HybridConfig cfg_;
    SwinModel<T> swin_;
    ConvModel<T> cnn_;
    Linear<T> q_adapter_, kv_adapter_;
    CrossAttention<T> xattn_;
    LayerNorm<T> head_norm_;
    Linear<T> head_fc_;
    ParameterSet<T> params_;
};

} // namespace forgelens
