#pragma once

// Finite-difference gradient cases shared by the unit suites and the
// acceptance runner. Every case uses 64-bit tensors of at most 64 elements
// per input; model cases use a 2 x 3 x 16 x 16 batch.

#include <functional>
#include <string>
#include <vector>

#include "forgelens/models.hpp"
#include "forgelens/ops.hpp"
#include "forgelens/swin.hpp"
#include "support.hpp"

namespace fl_test {

struct GradCase {
    std::string name;
    std::function<GradReport()> run;
};

inline constexpr double kOpTolerance = 1e-4;
inline constexpr double kModelTolerance = 1e-3;

namespace grad_detail {

using namespace forgelens;
using D = double;

/// sum(out * R) for a fixed random R, so every output element matters.
inline Tensor<D> weighted_sum(const Tensor<D>& out, std::uint64_t seed) {
    Philox rng(seed, 1234);
    const auto r = random_tensor<D>(out.shape(), rng);
    return sum(mul(out, r));
}

/// A case with `inputs` as leaves and `f` mapping them to an output tensor.
inline GradCase unary_case(const std::string& name, std::vector<Shape> shapes, std::function<Tensor<D>(const std::vector<Tensor<D>>&)> f,
                           std::uint64_t seed, double scale = 1.0) {
    return {name, [=] {
                Philox rng(seed);
                std::vector<Tensor<D>> in;
                std::vector<GradLeaf> leaves;
                for (std::size_t i = 0; i < shapes.size(); ++i) {
                    in.push_back(random_tensor<D>(shapes[i], rng, scale, true));
                    leaves.push_back({name + ".in" + std::to_string(i), in.back()});
                }
                return check_gradients([&] { return weighted_sum(f(in), seed); }, leaves);
            }};
}

} // namespace grad_detail

/// One case per differentiable op, plus a composite conv, norm, attention
/// and cross-entropy graph.
inline std::vector<GradCase> op_grad_cases() {
    using namespace forgelens;
    using grad_detail::D;
    using grad_detail::unary_case;
    using V = std::vector<Tensor<D>>;
    std::vector<GradCase> c;
    c.push_back(unary_case("add_broadcast", {{2, 3, 4}, {3, 1}}, [](const V& v) { return add(v[0], v[1]); }, 1));
    c.push_back(unary_case("sub_broadcast", {{2, 3}, {3}}, [](const V& v) { return sub(v[0], v[1]); }, 2));
    c.push_back(unary_case("mul_broadcast", {{2, 3, 4}, {4}}, [](const V& v) { return mul(v[0], v[1]); }, 3));
    c.push_back(unary_case("mul_same_leaf", {{3, 4}}, [](const V& v) { return mul(v[0], v[0]); }, 4));
    c.push_back(unary_case("scale", {{3, 5}}, [](const V& v) { return scale(v[0], 2.5); }, 5));
    c.push_back(unary_case("relu", {{4, 6}}, [](const V& v) { return relu(v[0]); }, 6));
    c.push_back(unary_case("gelu", {{4, 6}}, [](const V& v) { return gelu(v[0]); }, 7, 3.0));
    c.push_back(unary_case("sum", {{2, 3, 4}}, [](const V& v) { return sum(v[0]); }, 8));
    c.push_back(unary_case("mean", {{2, 3, 4}}, [](const V& v) { return mean(v[0]); }, 9));
    c.push_back(unary_case("mean_axis_1", {{2, 3, 4}}, [](const V& v) { return mean_axis(v[0], 1); }, 10));
    c.push_back(unary_case("mean_axis_last", {{2, 3, 4}}, [](const V& v) { return mean_axis(v[0], -1); }, 11));
    c.push_back(unary_case("matmul", {{3, 4}, {4, 5}}, [](const V& v) { return matmul(v[0], v[1]); }, 12));
    c.push_back(unary_case("bmm", {{2, 3, 4}, {2, 4, 5}}, [](const V& v) { return bmm(v[0], v[1]); }, 13));
    c.push_back(unary_case("bmm_transpose_b", {{2, 3, 4}, {2, 5, 4}}, [](const V& v) { return bmm(v[0], v[1], true); }, 14));
    c.push_back(unary_case("linear", {{2, 3, 4}, {4, 5}, {5}}, [](const V& v) { return linear(v[0], v[1], v[2]); }, 15));
    c.push_back(unary_case("linear_no_bias", {{3, 4}, {4, 5}}, [](const V& v) { return linear(v[0], v[1], Tensor<D>()); }, 16));
    c.push_back(unary_case("softmax_last", {{3, 4}}, [](const V& v) { return softmax(v[0], -1); }, 17, 2.0));
    c.push_back(unary_case("softmax_axis0", {{3, 4}}, [](const V& v) { return softmax(v[0], 0); }, 18, 2.0));
    c.push_back(unary_case("cross_entropy", {{6, 2}}, [](const V& v) { return cross_entropy_loss(v[0], {0, 1, 1, 0, 1, 0}); }, 19, 2.0));
    c.push_back(unary_case("layer_norm", {{3, 8}, {8}, {8}}, [](const V& v) { return layer_norm(v[0], v[1], v[2]); }, 20));
    c.push_back(unary_case("batch_norm_train", {{3, 2, 2, 2}, {2}, {2}}, [](const V& v) {
        RunningStats<D> stats(2);
        return batch_norm(v[0], v[1], v[2], stats, true);
    }, 21));
    c.push_back(unary_case("batch_norm_eval", {{3, 2, 2, 2}, {2}, {2}}, [](const V& v) {
        RunningStats<D> stats(2);
        Tensor<D> m = stats.mean, var = stats.var;
        m.mutable_values()[0] = 0.3;
        var.mutable_values()[1] = 2.0;
        return batch_norm(v[0], v[1], v[2], stats, false);
    }, 22));
    c.push_back(unary_case("dropout_train", {{4, 8}}, [](const V& v) {
        Philox rng(5);
        return dropout(v[0], 0.3, &rng, true);
    }, 23));
    c.push_back(unary_case("conv2d_stride2_pad1", {{1, 2, 5, 5}, {3, 2, 3, 3}, {3}},
                           [](const V& v) { return conv2d(v[0], v[1], v[2], 2, 1); }, 24));
    c.push_back(unary_case("conv2d_no_bias", {{2, 2, 4, 4}, {2, 2, 2, 2}},
                           [](const V& v) { return conv2d(v[0], v[1], Tensor<D>(), 1, 0); }, 25));
    c.push_back(unary_case("max_pool2d", {{1, 2, 4, 4}}, [](const V& v) { return max_pool2d(v[0], 2, 2); }, 26));
    c.push_back(unary_case("global_avg_pool", {{2, 3, 2, 2}}, [](const V& v) { return global_avg_pool(v[0]); }, 27));
    c.push_back(unary_case("reshape", {{2, 3, 4}}, [](const V& v) { return reshape(v[0], {4, 6}); }, 28));
    c.push_back(unary_case("permute", {{2, 3, 4}}, [](const V& v) { return permute(v[0], {2, 0, 1}); }, 29));
    c.push_back(unary_case("roll", {{2, 4, 4, 2}}, [](const V& v) { return roll(v[0], {-1, 2}, {1, 2}); }, 30));
    c.push_back(unary_case("concat", {{2, 3}, {2, 2}}, [](const V& v) { return concat<D>({v[0], v[1]}, 1); }, 31));
    c.push_back(unary_case("slice", {{4, 5}}, [](const V& v) { return slice(v[0], 1, 1, 3); }, 32));
    c.push_back(unary_case("index_rows_repeated", {{5, 3}}, [](const V& v) { return index_rows(v[0], {4, 0, 4, 2}); }, 33));
    c.push_back(unary_case("window_partition", {{1, 4, 4, 2}}, [](const V& v) { return window_partition(v[0], 2); }, 34));
    c.push_back(unary_case("cyclic_shift", {{1, 4, 4, 2}}, [](const V& v) { return cyclic_shift(v[0], 1); }, 35));
    c.push_back(unary_case("composite_conv_norm_attention_ce",
                           {{1, 2, 4, 4}, {4, 2, 3, 3}, {4}, {4, 4}, {4, 4}, {4, 4}, {4, 2}},
                           [](const V& v) {
                               auto t = conv2d(v[0], v[1], Tensor<D>(), 1, 1);           // [1,4,4,4]
                               t = reshape(permute(t, {0, 2, 3, 1}), {1, 16, 4});
                               t = layer_norm(t, v[2], Tensor<D>::zeros({4}));
                               const auto q = linear(t, v[3], Tensor<D>());
                               const auto k = linear(t, v[4], Tensor<D>());
                               const auto val = linear(t, v[5], Tensor<D>());
                               const auto a = softmax(scale(bmm(q, k, true), 0.5), -1);
                               const auto pooled = mean_axis(bmm(a, val), 1);             // [1,4]
                               return cross_entropy_loss(linear(pooled, v[6], Tensor<D>()), {1});
                           },
                           36));
    return c;
}

/// Small shifted-window config: 8 x 8 patch grid, window 4, shift 2 in the
/// first stage.
inline nlohmann::json grad_swin_config() {
    return {{"arch", "swin"}, {"image_size", 16}, {"patch_size", 2}, {"embed_dim", 8}, {"depths", {2, 2}},
            {"heads", {2, 2}}, {"window_size", 4}, {"mlp_ratio", 2}, {"dropout", 0.1}};
}

inline nlohmann::json grad_conv_config(const std::string& arch) {
    return {{"arch", arch}, {"width", 0.25}, {"dropout", 0.1}, {"image_size", 16}};
}

inline nlohmann::json grad_hybrid_config(const std::string& mode) {
    return {{"arch", "hybrid"},
            {"swin", grad_swin_config()},
            {"cnn", grad_conv_config("resnet_lite")},
            {"fusion", {{"mode", mode}, {"shared_dim", 8}, {"heads", 2}, {"dropout", 0.1}}}};
}

/// Full-model checks: cross-entropy of a train-mode forward on a random
/// 2 x 3 x 16 x 16 batch, a random subset of each parameter tensor.
inline std::vector<GradCase> model_grad_cases() {
    using namespace forgelens;
    std::vector<std::pair<std::string, nlohmann::json>> configs{
        {"swin", grad_swin_config()},
        {"resnet_lite", grad_conv_config("resnet_lite")},
        {"alexnet_lite", grad_conv_config("alexnet_lite")},
        {"vgg_lite", grad_conv_config("vgg_lite")},
        {"hybrid_cross_attention", grad_hybrid_config("cross_attention")},
        {"hybrid_concat", grad_hybrid_config("concat")},
    };
    std::vector<GradCase> c;
    std::uint64_t seed = 100;
    for (const auto& [name, cfg] : configs) {
        const std::uint64_t s = seed++;
        c.push_back({name, [cfg = cfg, s] {
                         auto model = build_model<double>(cfg, s);
                         Philox rng(s, 3);
                         randomize_parameters(model->parameters(), rng, 0.5);
                         const auto x = random_tensor<double>({2, 3, 16, 16}, rng);
                         return check_model_gradients(*model, x, {0, 1}, 6, s);
                     }});
    }
    return c;
}

} // namespace fl_test
