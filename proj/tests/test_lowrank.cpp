#include <gtest/gtest.h>

#include <cmath>

#include "stum/lowrank.hpp"

using namespace stum;

namespace {

// numeric rank via Gaussian elimination with partial pivoting
std::size_t matrix_rank(std::vector<double> m, std::size_t rows, std::size_t cols,
                        double tol = 1e-9) {
    std::size_t rank = 0;
    for (std::size_t col = 0; col < cols && rank < rows; ++col) {
        std::size_t pivot = rank;
        for (std::size_t r = rank + 1; r < rows; ++r)
            if (std::fabs(m[r * cols + col]) > std::fabs(m[pivot * cols + col]))
                pivot = r;
        if (std::fabs(m[pivot * cols + col]) < tol) continue;
        for (std::size_t c = 0; c < cols; ++c)
            std::swap(m[rank * cols + c], m[pivot * cols + c]);
        for (std::size_t r = 0; r < rows; ++r) {
            if (r == rank) continue;
            double f = m[r * cols + col] / m[rank * cols + col];
            for (std::size_t c = 0; c < cols; ++c) m[r * cols + c] -= f * m[rank * cols + c];
        }
        ++rank;
    }
    return rank;
}

LowRankLinear make_layer(std::size_t in, std::size_t out, std::size_t rank,
                         std::uint64_t seed = 21,
                         ScaleConvention conv = ScaleConvention::Paper,
                         double lora_scale = 1.0) {
    LowRankConfig cfg;
    cfg.in = in;
    cfg.out = out;
    cfg.rank = rank;
    cfg.lora_scale = lora_scale;
    cfg.convention = conv;
    Rng rng(seed);
    return LowRankLinear(cfg, rng);
}

}  // namespace

TEST(LowRank, InitDeltaIsZero) {
    LowRankLinear l = make_layer(6, 5, 2);
    Tensor delta = l.delta_weight();
    for (double v : delta.data()) EXPECT_DOUBLE_EQ(v, 0.0);
    for (double v : l.factor_b().data()) EXPECT_DOUBLE_EQ(v, 0.0);
    for (double v : l.bias().data()) EXPECT_DOUBLE_EQ(v, 0.0);
    EXPECT_FALSE(l.base().requires_grad());
    EXPECT_TRUE(l.factor_a().requires_grad());
}

TEST(LowRank, ZeroFactorsMatchFrozenDense) {
    LowRankLinear l = make_layer(6, 5, 2);
    Rng rng(8);
    Tensor x = Tensor::uniform({3, 6}, -1.0, 1.0, rng);
    Tensor y = l.apply_last(x);
    Tensor dense = matmul(x, l.base());
    ASSERT_EQ(y.shape(), (Shape{3, 5}));
    for (std::size_t i = 0; i < y.size(); ++i)
        EXPECT_NEAR(y.data()[i], dense.data()[i], 1e-15);
}

TEST(LowRank, DeltaHandOracle) {
    // A = [[1],[1]], B = [[2],[3]], r=1, paper scale r/(alpha+eps) with alpha=1
    LowRankLinear l = make_layer(2, 2, 1);
    l.factor_a().data() = {1, 1};
    l.factor_b().data() = {2, 3};
    double s = 1.0 / (1.0 + 1e-8);
    Tensor d = l.delta_weight();
    // A B^T = [[2,3],[2,3]]
    EXPECT_NEAR(d.data()[0], 2.0 * s, 1e-12);
    EXPECT_NEAR(d.data()[1], 3.0 * s, 1e-12);
    EXPECT_NEAR(d.data()[2], 2.0 * s, 1e-12);
    EXPECT_NEAR(d.data()[3], 3.0 * s, 1e-12);
}

TEST(LowRank, RankBoundOnRandomInstances) {
    Rng rng(99);
    for (int trial = 0; trial < 20; ++trial) {
        std::size_t r = 1 + trial % 4;
        LowRankLinear l = make_layer(8, 8, r, 1000 + trial);
        l.factor_a() = Tensor::uniform({8, r}, -1.0, 1.0, rng, true);
        l.factor_b() = Tensor::uniform({8, r}, -1.0, 1.0, rng, true);
        Tensor d = l.delta_weight();
        EXPECT_LE(matrix_rank(d.data(), 8, 8), r);
    }
}

TEST(LowRank, ParamCountFormula) {
    // r(N_in + M_out) + M_out, spec example: r=4, in=307, out=32 -> 4*339+32 = 1388
    EXPECT_EQ(LowRankLinear::param_count_formula(307, 32, 4), 1388u);
    for (std::size_t in : {3u, 16u, 64u})
        for (std::size_t out : {2u, 16u, 48u})
            for (std::size_t r = 1; r <= std::min(in, out); r += 3) {
                LowRankLinear l = make_layer(in, out, r);
                // enumeration oracle: count trainable elements directly
                ParamList params;
                l.collect_params("m", params);
                std::size_t counted = 0;
                for (const auto& p : params)
                    if (p.trainable) counted += p.tensor.size();
                EXPECT_EQ(counted, r * (in + out) + out);
                EXPECT_EQ(l.trainable_param_count(), counted);
                EXPECT_EQ(l.dense_equivalent_count(), in * out + out);
            }
}

TEST(LowRank, ScaleConventions) {
    LowRankLinear paper = make_layer(4, 4, 2, 3, ScaleConvention::Paper, 0.5);
    EXPECT_NEAR(paper.scale(), 2.0 / (0.5 + 1e-8), 1e-9);
    LowRankLinear alt = make_layer(4, 4, 2, 3, ScaleConvention::AlphaOverR, 0.5);
    EXPECT_NEAR(alt.scale(), 0.25, 1e-15);
}

TEST(LowRank, ApplyAxisMatchesManualTranspose) {
    LowRankLinear l = make_layer(5, 5, 2, 17);
    Rng rng(6);
    l.factor_b() = Tensor::uniform({5, 2}, -0.5, 0.5, rng, true);
    Tensor x = Tensor::uniform({2, 5, 3, 4}, -1.0, 1.0, rng);
    Tensor y = l.apply_axis(x, 1);
    Tensor manual = moveaxis(l.apply_last(moveaxis(x, 1, 3)), 3, 1);
    ASSERT_EQ(y.shape(), x.shape());
    for (std::size_t i = 0; i < y.size(); ++i)
        EXPECT_DOUBLE_EQ(y.data()[i], manual.data()[i]);
}

TEST(LowRank, RejectsBadRank) {
    LowRankConfig cfg;
    cfg.in = 4;
    cfg.out = 3;
    cfg.rank = 5;
    Rng rng(1);
    EXPECT_THROW(LowRankLinear(cfg, rng), ConfigError);
    cfg.rank = 0;
    EXPECT_THROW(LowRankLinear(cfg, rng), ConfigError);
}

TEST(LowRank, GradientsFlowThroughFactors) {
    LowRankLinear l = make_layer(4, 3, 2, 55);
    Rng rng(2);
    Tensor x = Tensor::uniform({2, 4}, -1.0, 1.0, rng);
    Tensor loss = sum(l.apply_last(x));
    loss.backward();
    EXPECT_TRUE(l.factor_a().has_grad());
    EXPECT_TRUE(l.factor_b().has_grad());
    EXPECT_TRUE(l.bias().has_grad());
    EXPECT_FALSE(l.base().has_grad());
    // bias grad of sum-loss is the number of rows
    for (double g : l.bias().grad()) EXPECT_DOUBLE_EQ(g, 2.0);
}
