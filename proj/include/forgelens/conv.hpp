#pragma once

// Reduced convolutional baselines. With width multiplier m and base width
// b = round(16 m) (at least 1), the layer tables are:
//
// resnet_lite   stem    conv3x3 s2 3->b, BN, ReLU
//               stage1  2 x residual_block(b -> b, stride 1)
//               stage2  residual_block(b -> 2b, stride 2, 1x1 projection), residual_block(2b -> 2b)
//               pool    global average -> features (D = 2b)
//
// alexnet_lite  conv1   conv5x5 s2 p2 3->b, ReLU, maxpool 2
//               conv2   conv3x3 p1 b->2b, ReLU, maxpool 2
//               conv3   conv3x3 p1 2b->2b, ReLU
//               fc1     global average, linear 2b->4b, ReLU -> features (D = 4b)
//
// vgg_lite      conv1   conv3x3 p1 3->b, BN, ReLU
//               conv2   conv3x3 p1 b->b, BN, ReLU, maxpool 2
//               conv3   conv3x3 p1 b->2b, BN, ReLU
//               conv4   conv3x3 p1 2b->2b, BN, ReLU, maxpool 2
//               fc1     global average, linear 2b->4b, ReLU -> features (D = 4b)
//
// Every variant ends in head = dropout, linear D->2. Convolutions followed
// by BN carry no bias; the others do.

#include <algorithm>
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

enum class ConvVariant { resnet_lite, alexnet_lite, vgg_lite };

inline std::string to_string(ConvVariant v) {
    switch (v) {
    case ConvVariant::resnet_lite: return "resnet_lite";
    case ConvVariant::alexnet_lite: return "alexnet_lite";
    case ConvVariant::vgg_lite: return "vgg_lite";
    }
    return "?";
}

inline ConvVariant parse_conv_variant(const std::string& s) {
    if (s == "resnet_lite") return ConvVariant::resnet_lite;
    if (s == "alexnet_lite") return ConvVariant::alexnet_lite;
    if (s == "vgg_lite") return ConvVariant::vgg_lite;
    throw ConfigError("unknown conv variant '" + s + "' (expected resnet_lite, alexnet_lite or vgg_lite)");
}

struct ConvConfig {
    ConvVariant variant = ConvVariant::resnet_lite;
    double width = 1.0;
    double dropout = 0.1;
    std::size_t image_size = 64;

    std::size_t base() const { return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(16.0 * width))); }

    std::size_t feature_dim() const {
        return variant == ConvVariant::resnet_lite ? 2 * base() : 4 * base();
    }

    /// Spatial extent of the final feature map.
    std::size_t map_size() const {
        switch (variant) {
        case ConvVariant::resnet_lite: return (((image_size - 1) / 2 + 1) - 1) / 2 + 1;
        case ConvVariant::alexnet_lite: return ((image_size - 1) / 2 + 1) / 2 / 2;
        case ConvVariant::vgg_lite: return image_size / 2 / 2;
        }
        return 0;
    }

    void validate() const {
        if (!(width > 0.0) || !std::isfinite(width)) throw ConfigError("conv width multiplier must be positive");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("conv dropout must be in [0, 1)");
        if (image_size < 8) throw ConfigError("conv backbones need image_size >= 8");
    }

    nlohmann::json to_json() const {
        return {{"arch", to_string(variant)}, {"width", width}, {"dropout", dropout}, {"image_size", image_size}};
    }

    static ConvConfig from_json(const nlohmann::json& j) {
        ConvConfig c;
        c.variant = parse_conv_variant(j.at("arch").get<std::string>());
        if (j.contains("width")) c.width = j.at("width");
        if (j.contains("dropout")) c.dropout = j.at("dropout");
        if (j.contains("image_size")) c.image_size = j.at("image_size");
        c.validate();
        return c;
    }
};

/// out = relu(F(x) + shortcut(x)), F = conv3x3(stride), BN, ReLU, conv3x3, BN.
/// The shortcut is the identity when shapes agree, else conv1x1(stride) + BN.
template <class T>
struct ResidualBlock {
    Conv2d<T> conv1, conv2, proj;
    BatchNorm<T> bn1, bn2, proj_bn;
    bool has_proj = false;

    ResidualBlock() = default;
    ResidualBlock(std::size_t in, std::size_t out, std::size_t stride, Philox& rng)
        : conv1(in, out, 3, stride, 1, false, rng), conv2(out, out, 3, 1, 1, false, rng), bn1(out), bn2(out) {
        if (stride == 0) throw ConfigError("residual block stride must be positive");
        has_proj = in != out || stride != 1;
        if (has_proj) {
            proj = Conv2d<T>(in, out, 1, stride, 0, false, rng);
            proj_bn = BatchNorm<T>(out);
        }
    }

    Tensor<T> branch(const Tensor<T>& x, const ForwardContext& ctx) {
        return bn2(conv2(relu(bn1(conv1(x), ctx))), ctx);
    }

    Tensor<T> shortcut(const Tensor<T>& x, const ForwardContext& ctx) {
        if (!has_proj) return x;
        return proj_bn(proj(x), ctx);
    }

    Tensor<T> operator()(const Tensor<T>& x, const ForwardContext& ctx) {
        if (x.rank() != 4 || x.dim(1) != conv1.weight.dim(1))
            throw ConfigError("residual block expects " + std::to_string(conv1.weight.dim(1)) + " channels, got " +
                              shape_str(x.shape()));
        return relu(add(branch(x, ctx), shortcut(x, ctx)));
    }

    void collect(ParameterSet<T>& ps, const std::string& name, const std::string& group) const {
        conv1.collect(ps, name + ".conv1", group);
        bn1.collect(ps, name + ".bn1", group);
        conv2.collect(ps, name + ".conv2", group);
        bn2.collect(ps, name + ".bn2", group);
        if (has_proj) {
            proj.collect(ps, name + ".proj", group);
            proj_bn.collect(ps, name + ".proj_bn", group);
        }
    }
};

template <class T>
class ConvModel : public Model<T> {
public:
    ConvModel(ConvConfig cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Philox rng(derive_seed(seed, to_string(cfg_.variant)));
        const std::size_t b = cfg_.base();
        switch (cfg_.variant) {
        case ConvVariant::resnet_lite:
            convs_.emplace_back(3, b, 3, 2, 1, false, rng);
            bns_.emplace_back(b);
            convs_[0].collect(params_, "stem.conv", "stem");
            bns_[0].collect(params_, "stem.bn", "stem");
            blocks_.emplace_back(b, b, 1, rng);
            blocks_.emplace_back(b, b, 1, rng);
            blocks_.emplace_back(b, 2 * b, 2, rng);
            blocks_.emplace_back(2 * b, 2 * b, 1, rng);
            for (std::size_t i = 0; i < blocks_.size(); ++i) {
                const std::string name = "stage" + std::to_string(i / 2 + 1) + ".block" + std::to_string(i % 2);
                blocks_[i].collect(params_, name, name);
            }
            break;
        case ConvVariant::alexnet_lite:
            convs_.emplace_back(3, b, 5, 2, 2, true, rng);
            convs_.emplace_back(b, 2 * b, 3, 1, 1, true, rng);
            convs_.emplace_back(2 * b, 2 * b, 3, 1, 1, true, rng);
            for (std::size_t i = 0; i < 3; ++i) convs_[i].collect(params_, conv_name(i), conv_name(i));
            break;
        case ConvVariant::vgg_lite: {
            const std::size_t widths[5] = {3, b, b, 2 * b, 2 * b};
            for (std::size_t i = 0; i < 4; ++i) {
                convs_.emplace_back(widths[i], widths[i + 1], 3, 1, 1, false, rng);
                bns_.emplace_back(widths[i + 1]);
                convs_[i].collect(params_, conv_name(i) + ".conv", conv_name(i));
                bns_[i].collect(params_, conv_name(i) + ".bn", conv_name(i));
            }
            break;
        }
        }
        if (cfg_.variant != ConvVariant::resnet_lite) {
            fc1_ = Linear<T>(2 * b, 4 * b, true, rng, InitScheme::he_normal);
            fc1_.collect(params_, "fc1", "fc1");
        }
        head_ = Linear<T>(cfg_.feature_dim(), 2, true, rng);
        head_.collect(params_, "head.fc", "head");
    }

    const ConvConfig& config() const { return cfg_; }
    ResidualBlock<T>& residual_block(std::size_t i) { return blocks_.at(i); }

    /// Final convolutional map [N, C, h, w] before global pooling.
    Tensor<T> feature_map(const Tensor<T>& x, const ForwardContext& ctx) {
        if (x.rank() != 4 || x.dim(1) != 3 || x.dim(2) != cfg_.image_size || x.dim(3) != cfg_.image_size)
            throw ConfigError(to_string(cfg_.variant) + " expects [N,3," + std::to_string(cfg_.image_size) + "," +
                              std::to_string(cfg_.image_size) + "], got " + shape_str(x.shape()));
        Tensor<T> t;
        switch (cfg_.variant) {
        case ConvVariant::resnet_lite:
            t = relu(bns_[0](convs_[0](x), ctx));
            for (auto& blk : blocks_) t = blk(t, ctx);
            break;
        case ConvVariant::alexnet_lite:
            t = max_pool2d(relu(convs_[0](x)), 2, 2);
            t = max_pool2d(relu(convs_[1](t)), 2, 2);
            t = relu(convs_[2](t));
            break;
        case ConvVariant::vgg_lite:
            t = x;
            for (std::size_t i = 0; i < 4; ++i) {
                t = relu(bns_[i](convs_[i](t), ctx));
                if (i == 1 || i == 3) t = max_pool2d(t, 2, 2);
            }
            break;
        }
        return t;
    }

    /// Backbone without the head: map positions as tokens [N, h*w, C] and
    /// the penultimate features.
    ModelOutput<T> encode(const Tensor<T>& x, const ForwardContext& ctx) {
        const auto map = feature_map(x, ctx);
        const std::size_t n = map.dim(0), c = map.dim(1), hw = map.dim(2) * map.dim(3);
        ModelOutput<T> out;
        out.tokens = permute(reshape(map, {n, c, hw}), {0, 2, 1});
        auto pooled = global_avg_pool(map);
        out.features = cfg_.variant == ConvVariant::resnet_lite ? pooled : relu(fc1_(pooled));
        return out;
    }

    ModelOutput<T> forward(const Tensor<T>& x, const ForwardContext& ctx) override {
        auto out = encode(x, ctx);
        out.logits = head_(dropout(out.features, cfg_.dropout, ctx.rng, ctx.training()));
        return out;
    }

    const ParameterSet<T>& parameters() const override { return params_; }
    nlohmann::json config_json() const override { return cfg_.to_json(); }
    std::size_t image_size() const override { return cfg_.image_size; }
    std::size_t feature_dim() const override { return cfg_.feature_dim(); }

private:
    static std::string conv_name(std::size_t i) { return "conv" + std::to_string(i + 1); }

    ConvConfig cfg_;
    std::vector<Conv2d<T>> convs_;
    std::vector<BatchNorm<T>> bns_;
    std::vector<ResidualBlock<T>> blocks_;
    Linear<T> fc1_;
    Linear<T> head_;
    ParameterSet<T> params_;
};

} // namespace forgelens
