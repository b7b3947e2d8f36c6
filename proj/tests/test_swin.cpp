#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "forgelens/swin.hpp"
#include "grad_cases.hpp"
#include "support.hpp"
#include "swin_oracle.hpp"

namespace {

using namespace forgelens;
using fl_test::random_tensor;

/// Grid whose channel c of cell (y, x) holds 100 y + 10 x + c.
Tensor<double> labelled_grid(std::size_t n, std::size_t h, std::size_t w, std::size_t c) {
    std::vector<double> v;
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                for (std::size_t k = 0; k < c; ++k) v.push_back(1000.0 * b + 100.0 * y + 10.0 * x + k);
    return Tensor<double>({n, h, w, c}, v);
}

SwinConfig toy_config(std::size_t image, std::size_t patch, std::size_t dim) {
    SwinConfig c;
    c.image_size = image;
    c.patch_size = patch;
    c.embed_dim = dim;
    c.depths = {2, 2};
    c.heads = {2, 4};
    c.window_size = 4;
    c.mlp_ratio = 2;
    return c;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    EXPECT_EQ(a.size(), b.size());
    double m = 0.0;
    for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

TEST(SwinConfigTest, ToyAndTinyValidate) {
    EXPECT_NO_THROW(SwinConfig::toy().validate());
    EXPECT_NO_THROW(SwinConfig::tiny().validate());
    const auto c = SwinConfig::from_json({{"preset", "tiny"}});
    EXPECT_EQ(c.embed_dim, 96u);
    EXPECT_EQ(c.depths, (std::vector<std::size_t>{2, 2, 6, 2}));
    EXPECT_EQ(c.window(0), 7u);
    EXPECT_EQ(c.shift(0), 3u);
    EXPECT_EQ(c.shift(3), 0u);  // 7 x 7 grid equals the window
}

TEST(SwinConfigTest, RejectsBadGeometry) {
    auto c = toy_config(30, 4, 16);
    EXPECT_THROW(c.validate(), ConfigError);
    c = toy_config(32, 4, 16);
    c.heads = {3, 4};
    EXPECT_THROW(c.validate(), ConfigError);
    c = toy_config(24, 4, 16);  // 6 x 6 grid, window 4
    EXPECT_THROW(c.validate(), ConfigError);
    c = toy_config(32, 4, 16);
    c.depths = {2};
    EXPECT_THROW(c.validate(), ConfigError);
    c = toy_config(32, 4, 16);
    c.dropout = 1.0;
    EXPECT_THROW(c.validate(), ConfigError);
}

TEST(WindowPartition, CountAndShape) {
    const auto w = window_partition(labelled_grid(1, 4, 4, 2), 2);
    EXPECT_EQ(w.shape(), (Shape{4, 4, 2}));
    const auto w2 = window_partition(labelled_grid(3, 8, 8, 1), 4);
    EXPECT_EQ(w2.shape(), (Shape{12, 16, 1}));
}

TEST(WindowPartition, CoordinateOracle) {
    const std::size_t n = 2, h = 8, wd = 4, c = 3, w = 2;
    const auto grid = labelled_grid(n, h, wd, c);
    const auto win = window_partition(grid, w);
    const auto& v = win.values();
    const std::size_t nwx = wd / w;
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < wd; ++x) {
                const std::size_t widx = b * (h / w) * nwx + (y / w) * nwx + x / w;
                const std::size_t t = (y % w) * w + x % w;
                for (std::size_t k = 0; k < c; ++k)
                    EXPECT_EQ(v[(widx * w * w + t) * c + k], 1000.0 * b + 100.0 * y + 10.0 * x + k);
            }
}

TEST(WindowPartition, ReverseIsExactInverse) {
    Philox rng(11);
    for (std::size_t w : {1u, 2u, 4u}) {
        const auto x = random_tensor<float>({2, 8, 8, 3}, rng);
        const auto back = window_reverse(window_partition(x, w), w, 2, 8, 8);
        EXPECT_EQ(back.shape(), x.shape());
        EXPECT_TRUE(std::equal(back.values().begin(), back.values().end(), x.values().begin()));
    }
}

TEST(WindowPartition, IndivisibleGridThrows) {
    EXPECT_THROW(window_partition(labelled_grid(1, 6, 6, 1), 4), DimensionError);
    EXPECT_THROW(window_partition(Tensor<double>::zeros({4, 4, 2}), 2), DimensionError);
}

TEST(CyclicShift, ModularOracle) {
    for (long d : {1L, 2L, 3L}) {
        const auto x = labelled_grid(1, 4, 4, 2);
        const auto y = cyclic_shift(x, d);
        for (std::size_t r = 0; r < 4; ++r)
            for (std::size_t c = 0; c < 4; ++c)
                for (std::size_t k = 0; k < 2; ++k)
                    EXPECT_EQ(y.values()[(r * 4 + c) * 2 + k],
                              x.values()[(((r + d) % 4) * 4 + (c + d) % 4) * 2 + k]);
    }
}

TEST(CyclicShift, ZeroIsIdentityAndInverseRestores) {
    Philox rng(3);
    const auto x = random_tensor<double>({2, 8, 8, 3}, rng);
    const auto same = cyclic_shift(x, 0);
    EXPECT_TRUE(std::equal(same.values().begin(), same.values().end(), x.values().begin()));
    const auto back = cyclic_shift(cyclic_shift(x, 2), -2);
    EXPECT_TRUE(std::equal(back.values().begin(), back.values().end(), x.values().begin()));
}

/// Masked pairs counted by enumerating every shifted window directly.
std::size_t brute_force_masked(std::size_t h, std::size_t w, std::size_t d) {
    std::size_t masked = 0;
    for (std::size_t wy = 0; wy < h / w; ++wy)
        for (std::size_t wx = 0; wx < h / w; ++wx)
            for (std::size_t i = 0; i < w * w; ++i)
                for (std::size_t j = 0; j < w * w; ++j) {
                    // shifted coords -> original coords
                    const std::size_t py = (wy * w + i / w + d) % h, px = (wx * w + i % w + d) % h;
                    const std::size_t qy = (wy * w + j / w + d) % h, qx = (wx * w + j % w + d) % h;
                    if (!fl_oracle::may_attend(py, px, qy, qx, h, h, w, d)) ++masked;
                }
    return masked;
}

TEST(ShiftMask, BruteForceCount4x4) {
    const auto m = build_shift_mask<double>(4, 4, 2, 1);
    EXPECT_EQ(m.shape(), (Shape{4, 4, 4}));
    std::size_t masked = 0;
    for (double v : m.values()) {
        EXPECT_TRUE(v == 0.0 || v == kMaskedLogit);
        masked += v != 0.0;
    }
    EXPECT_EQ(masked, brute_force_masked(4, 2, 1));
    // Window 0 interior; windows 1 and 2 split in two; window 3 in four.
    EXPECT_EQ(masked, 0u + 8u + 8u + 12u);
}

TEST(ShiftMask, MatchesBruteForceEntrywise) {
    for (auto [h, w, d] : {std::tuple{8u, 4u, 2u}, std::tuple{8u, 2u, 1u}, std::tuple{12u, 4u, 1u}, std::tuple{6u, 3u, 1u}}) {
        const auto m = build_shift_mask<double>(h, h, w, d);
        const std::size_t l = w * w, nw = h / w;
        for (std::size_t win = 0; win < nw * nw; ++win)
            for (std::size_t i = 0; i < l; ++i)
                for (std::size_t j = 0; j < l; ++j) {
                    const std::size_t wy = win / nw, wx = win % nw;
                    const std::size_t py = (wy * w + i / w + d) % h, px = (wx * w + i % w + d) % h;
                    const std::size_t qy = (wy * w + j / w + d) % h, qx = (wx * w + j % w + d) % h;
                    const bool allowed = fl_oracle::may_attend(py, px, qy, qx, h, h, w, d);
                    EXPECT_EQ(m.values()[(win * l + i) * l + j], allowed ? 0.0 : kMaskedLogit)
                        << "h=" << h << " w=" << w << " d=" << d << " win=" << win;
                }
        EXPECT_GT(brute_force_masked(h, w, d), 0u);
    }
}

TEST(ShiftMask, SymmetricAndZeroWithoutShift) {
    const auto m = build_shift_mask<double>(8, 8, 4, 2);
    const std::size_t l = 16;
    for (std::size_t win = 0; win < 4; ++win)
        for (std::size_t i = 0; i < l; ++i) {
            EXPECT_EQ(m.values()[(win * l + i) * l + i], 0.0);
            for (std::size_t j = 0; j < l; ++j)
                EXPECT_EQ(m.values()[(win * l + i) * l + j], m.values()[(win * l + j) * l + i]);
        }
    const auto z = build_shift_mask<double>(8, 8, 4, 0);
    for (double v : z.values()) EXPECT_EQ(v, 0.0);
    EXPECT_THROW(build_shift_mask<double>(8, 8, 4, 4), ConfigError);
}

TEST(RelativePosition, IndexFormulaAndRange) {
    const std::size_t w = 3, l = 9;
    const auto idx = relative_position_index(w);
    ASSERT_EQ(idx.size(), l * l);
    for (std::size_t i = 0; i < l; ++i) {
        EXPECT_EQ(idx[i * l + i], (w - 1) * (2 * w - 1) + (w - 1));
        for (std::size_t j = 0; j < l; ++j) {
            const long dy = static_cast<long>(i / w) - static_cast<long>(j / w);
            const long dx = static_cast<long>(i % w) - static_cast<long>(j % w);
            EXPECT_EQ(static_cast<long>(idx[i * l + j]), (dy + 2) * 5 + dx + 2);
        }
    }
    EXPECT_EQ(*std::max_element(idx.begin(), idx.end()), 24u);
}

TEST(PatchEmbed, TokenCountAndZeroInput) {
    auto cfg = toy_config(8, 4, 8);
    cfg.depths = {1};
    cfg.heads = {2};
    SwinModel<double> m(cfg, 1);
    const auto t = m.patch_embed(Tensor<double>::zeros({1, 3, 8, 8}));
    EXPECT_EQ(t.shape(), (Shape{1, 2, 2, 8}));  // four tokens
    for (double v : t.values()) EXPECT_EQ(v, 0.0);
}

TEST(PatchEmbed, MatchesPatchwiseDotProducts) {
    auto cfg = toy_config(16, 4, 8);
    SwinModel<double> m(cfg, 2);
    Philox rng(2);
    fl_test::randomize_parameters(m.parameters(), rng, 0.5);
    const auto x = random_tensor<double>({2, 3, 16, 16}, rng);
    const auto t = m.patch_embed(x);
    const auto w = fl_oracle::param(m.parameters(), "patch_embed.proj.weight");
    const auto b = fl_oracle::param(m.parameters(), "patch_embed.proj.bias");
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t ty = 0; ty < 4; ++ty)
            for (std::size_t tx = 0; tx < 4; ++tx)
                for (std::size_t o = 0; o < 8; ++o) {
                    double acc = b[o];
                    for (std::size_t c = 0; c < 3; ++c)
                        for (std::size_t ky = 0; ky < 4; ++ky)
                            for (std::size_t kx = 0; kx < 4; ++kx)
                                acc += x.values()[((n * 3 + c) * 16 + ty * 4 + ky) * 16 + tx * 4 + kx] *
                                       w[((o * 3 + c) * 4 + ky) * 4 + kx];
                    EXPECT_NEAR(t.values()[((n * 4 + ty) * 4 + tx) * 8 + o], acc, 1e-12);
                }
}

TEST(PatchEmbed, GradientMatchesFiniteDifferences) {
    SwinModel<double> model(SwinConfig::from_json(fl_test::grad_swin_config()), 8);
    Philox rng(8);
    fl_test::randomize_parameters(model.parameters(), rng, 0.5);
    const auto x = random_tensor<double>({2, 3, 16, 16}, rng);
    std::vector<fl_test::GradLeaf> leaves;
    for (const auto& p : model.parameters().params())
        if (p.group == "patch_embed") leaves.push_back({p.name, p.tensor});
    ASSERT_EQ(leaves.size(), 2u);
    const auto report = fl_test::check_gradients(
        [&] { return cross_entropy_loss(model.forward(x, {}).logits, {0, 1}); }, leaves);
    EXPECT_LT(report.max_rel_error, fl_test::kModelTolerance) << report.worst_leaf;
    EXPECT_EQ(report.checked, 8u * 3 * 2 * 2 + 8u);
}

TEST(WindowAttentionTest, SingleTokenWindowIsValueProjection) {
    Philox rng(4);
    WindowAttention<double> attn(4, 2, 1, rng);
    fl_test::Philox r2(5);
    for (Tensor<double> t : {attn.qkv.weight, attn.qkv.bias, attn.proj.weight, attn.proj.bias, attn.bias_table})
        for (auto& v : t.mutable_values()) v = 2.0 * r2.uniform() - 1.0;
    const auto x = random_tensor<double>({3, 1, 4}, r2);
    const auto y = attn(x, Tensor<double>());
    const auto qkv = fl_oracle::to_double(attn.qkv.weight), qb = fl_oracle::to_double(attn.qkv.bias);
    for (std::size_t b = 0; b < 3; ++b) {
        std::vector<double> v(4);
        for (std::size_t o = 0; o < 4; ++o) {
            v[o] = qb[8 + o];
            for (std::size_t i = 0; i < 4; ++i) v[o] += x.values()[b * 4 + i] * qkv[i * 12 + 8 + o];
        }
        const auto expect = fl_oracle::linear_rows(v, attn.proj);
        for (std::size_t o = 0; o < 4; ++o) EXPECT_NEAR(y.values()[b * 4 + o], expect[o], 1e-12);
    }
}

TEST(WindowAttentionTest, WeightsAreRowStochastic) {
    Philox rng(6);
    WindowAttention<double> attn(8, 2, 4, rng);
    fl_test::randomize_parameters([&] {
        ParameterSet<double> ps;
        attn.collect(ps, "a", "a");
        return ps;
    }(), rng, 1.0);
    const auto x = random_tensor<double>({4, 16, 8}, rng, 2.0);
    const auto mask = build_shift_mask<double>(8, 8, 4, 2);
    Tensor<double> weights;
    attn(x, mask, &weights);
    ASSERT_EQ(weights.shape(), (Shape{4, 2, 16, 16}));
    for (std::size_t r = 0; r < 4 * 2 * 16; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < 16; ++j) {
            const double a = weights.values()[r * 16 + j];
            EXPECT_GE(a, 0.0);
            s += a;
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
    // Masked pairs carry no weight.
    const std::size_t win = 3;
    for (std::size_t i = 0; i < 16; ++i)
        for (std::size_t j = 0; j < 16; ++j)
            if (mask.values()[(win * 16 + i) * 16 + j] != 0.0) {
                EXPECT_EQ(weights.values()[((win * 2) * 16 + i) * 16 + j], 0.0);
            }
}

TEST(WindowAttentionTest, RejectsWrongShapes) {
    Philox rng(1);
    EXPECT_THROW(WindowAttention<double>(6, 4, 2, rng), ConfigError);
    WindowAttention<double> attn(8, 2, 2, rng);
    EXPECT_THROW(attn(Tensor<double>::zeros({2, 4, 6}), Tensor<double>()), ConfigError);
    EXPECT_THROW(attn(Tensor<double>::zeros({2, 9, 8}), Tensor<double>()), ConfigError);
}

class BlockOracle : public ::testing::TestWithParam<std::size_t> {};

TEST_P(BlockOracle, FloatBlockMatchesDenseReference) {
    const std::size_t shift = GetParam();
    Philox rng(40 + shift);
    SwinBlock<float> blk(16, 2, 8, 4, shift, 2, rng);
    ParameterSet<float> ps;
    blk.collect(ps, "b", "b");
    fl_test::randomize_parameters(ps, rng, 0.3);
    const auto x = random_tensor<float>({2, 8, 8, 16}, rng);
    const auto y = blk(x);
    EXPECT_LT(max_abs_diff(fl_oracle::to_double(y), fl_oracle::dense_block_batch(x, blk)), 1e-5);
}

INSTANTIATE_TEST_SUITE_P(Shifts, BlockOracle, ::testing::Values(0u, 1u, 2u, 3u));

TEST(BlockOracleTest, ShiftChangesTheResult) {
    Philox a(9), b(9);
    SwinBlock<double> plain(8, 2, 8, 4, 0, 2, a), shifted(8, 2, 8, 4, 2, 2, b);
    ParameterSet<double> pp, sp;
    plain.collect(pp, "b", "b");
    shifted.collect(sp, "b", "b");
    Philox r1(3), r2(3);
    fl_test::randomize_parameters(pp, r1, 0.5);
    fl_test::randomize_parameters(sp, r2, 0.5);
    Philox rx(4);
    const auto x = random_tensor<double>({1, 8, 8, 8}, rx);
    EXPECT_GT(max_abs_diff(fl_oracle::to_double(plain(x)), fl_oracle::to_double(shifted(x))), 1e-3);
}

TEST(PatchMerge, ShapeAndGatherOrder) {
    const auto g = gather_2x2(labelled_grid(1, 4, 4, 2));
    ASSERT_EQ(g.shape(), (Shape{1, 2, 2, 8}));
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) {
            const std::size_t src[4][2] = {{2 * i, 2 * j}, {2 * i, 2 * j + 1}, {2 * i + 1, 2 * j}, {2 * i + 1, 2 * j + 1}};
            for (std::size_t k = 0; k < 4; ++k)
                for (std::size_t c = 0; c < 2; ++c)
                    EXPECT_EQ(g.values()[((i * 2 + j) * 4 + k) * 2 + c], 100.0 * src[k][0] + 10.0 * src[k][1] + c);
        }
    Philox rng(1);
    PatchMerging<double> pm(2, rng);
    EXPECT_EQ(pm(labelled_grid(3, 4, 4, 2)).shape(), (Shape{3, 2, 2, 4}));
    EXPECT_THROW(gather_2x2(labelled_grid(1, 3, 4, 2)), DimensionError);
}

TEST(PatchMerge, ConstantInputGivesIdenticalTokens) {
    Philox rng(2);
    PatchMerging<double> pm(3, rng);
    const auto y = pm(Tensor<double>::full({1, 4, 4, 3}, 0.7));
    for (std::size_t t = 1; t < 4; ++t)
        for (std::size_t c = 0; c < 6; ++c) EXPECT_EQ(y.values()[t * 6 + c], y.values()[c]);
}

TEST(SwinModelTest, ShiftsOnlyOnOddBlocks) {
    SwinModel<float> m(toy_config(32, 4, 16), 1);
    EXPECT_EQ(m.block(0, 0).shift, 0u);
    EXPECT_EQ(m.block(0, 1).shift, 2u);
    EXPECT_EQ(m.block(0, 1).window, 4u);
    EXPECT_EQ(m.block(1, 1).shift, 0u);  // 4 x 4 grid equals the window
    EXPECT_FALSE(m.block(0, 0).mask.defined());
    EXPECT_TRUE(m.block(0, 1).mask.defined());
}

TEST(SwinModelTest, LogitsShapeFiniteAndDeterministic) {
    SwinModel<float> m(SwinConfig::toy(), 7);
    Philox rng(1);
    const auto x = random_tensor<float>({3, 3, 64, 64}, rng);
    const auto a = m.forward(x, {});
    const auto b = m.forward(x, {});
    ASSERT_EQ(a.logits.shape(), (Shape{3, 2}));
    EXPECT_EQ(a.features.shape(), (Shape{3, 64}));
    EXPECT_EQ(a.tokens.shape(), (Shape{3, 64, 64}));  // 8 x 8 final grid
    for (float v : a.logits.values()) EXPECT_TRUE(std::isfinite(v));
    EXPECT_TRUE(std::equal(a.logits.values().begin(), a.logits.values().end(), b.logits.values().begin()));
}

TEST(SwinModelTest, SameSeedSameWeights) {
    SwinModel<float> a(SwinConfig::toy(), 3), b(SwinConfig::toy(), 3), c(SwinConfig::toy(), 4);
    const auto& pa = a.parameters().params();
    ASSERT_EQ(pa.size(), b.parameters().params().size());
    bool differs = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        EXPECT_TRUE(std::equal(pa[i].tensor.values().begin(), pa[i].tensor.values().end(),
                               b.parameters().params()[i].tensor.values().begin()));
        differs |= !std::equal(pa[i].tensor.values().begin(), pa[i].tensor.values().end(),
                               c.parameters().params()[i].tensor.values().begin());
    }
    EXPECT_TRUE(differs);
}

TEST(SwinModelTest, BatchPermutationEquivariance) {
    SwinModel<double> m(toy_config(32, 4, 16), 5);
    Philox rng(6);
    fl_test::randomize_parameters(m.parameters(), rng, 0.3);
    const auto x = random_tensor<double>({3, 3, 32, 32}, rng);
    const std::vector<std::size_t> perm{2, 0, 1};
    const auto xp = index_rows(x, perm);
    const auto a = m.forward(x, {}).logits, b = m.forward(xp, {}).logits;
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(b.values()[i * 2 + k], a.values()[perm[i] * 2 + k], 1e-12);
}

TEST(SwinModelTest, FullModelMatchesDenseReference) {
    SwinModel<float> m(toy_config(32, 4, 16), 12);
    Philox rng(12);
    fl_test::randomize_parameters(m.parameters(), rng, 0.3);
    const auto x = random_tensor<float>({2, 3, 32, 32}, rng);
    const auto logits = fl_oracle::to_double(m.forward(x, {}).logits);
    const auto all = fl_oracle::to_double(x);
    for (std::size_t n = 0; n < 2; ++n) {
        const std::vector<double> img(all.begin() + static_cast<long>(n * 3 * 32 * 32), all.begin() + static_cast<long>((n + 1) * 3 * 32 * 32));
        const auto ref = fl_oracle::dense_swin_logits(m, img);
        for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(logits[n * 2 + k], ref[k], 1e-5);
    }
}

TEST(SwinModelTest, RejectsWrongInputShape) {
    SwinModel<float> m(SwinConfig::toy(), 1);
    EXPECT_THROW(m.forward(Tensor<float>::zeros({1, 3, 32, 32}), {}), ConfigError);
    EXPECT_THROW(m.forward(Tensor<float>::zeros({1, 1, 64, 64}), {}), ConfigError);
}

TEST(SwinModelTest, TrainModeDropoutNeedsRng) {
    SwinModel<float> m(SwinConfig::toy(), 1);
    const auto x = Tensor<float>::zeros({2, 3, 64, 64});
    EXPECT_ANY_THROW(m.forward(x, ForwardContext{Mode::train, nullptr}));
}

TEST(SwinModelTest, ModelGradientsMatchFiniteDifferences) {
    for (const auto& c : fl_test::model_grad_cases()) {
        if (c.name != "swin") continue;
        const auto r = c.run();
        EXPECT_LT(r.max_rel_error, fl_test::kModelTolerance) << r.worst_leaf;
        EXPECT_GT(r.checked, 0u);
    }
}

} // namespace
