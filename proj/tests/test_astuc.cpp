#include <gtest/gtest.h>

#include <cmath>

#include "stum/astuc.hpp"

using namespace stum;

namespace {

LowRankConfig map_cfg(std::size_t rank = 2) {
    LowRankConfig c;
    c.rank = rank;
    return c;
}

Tensor random_state(Shape shape, std::uint64_t seed) {
    Rng rng(seed);
    return Tensor::uniform(std::move(shape), -1.0, 1.0, rng);
}

}  // namespace

TEST(Astuc, GateInitAtHalf) {
    Rng rng(1);
    AstucCell cell(MixAxis::Time, 6, map_cfg(), rng);
    EXPECT_DOUBLE_EQ(cell.gate().item(), 0.5);
}

TEST(Astuc, ForcedGateLimits) {
    Rng rng(2);
    AstucCell cell(MixAxis::Time, 4, map_cfg(), rng);
    Tensor x = random_state({2, 4, 3, 5}, 7);
    Tensor carried = random_state({2, 4, 3, 5}, 8);

    cell.forced_gate() = 0.0;  // pure carry-through
    Tensor y0 = cell.forward(x, carried);
    for (std::size_t i = 0; i < y0.size(); ++i)
        EXPECT_DOUBLE_EQ(y0.data()[i], carried.data()[i]);

    cell.forced_gate() = 1.0;  // pure mixed branch
    Tensor y1 = cell.forward(x, carried);
    for (double v : y1.data()) EXPECT_GE(v, 0.0);  // relu output
}

TEST(Astuc, ScalarMixOracle) {
    // extent-1 time axis: the low-rank map is 1x1, so with forced g=1 the cell
    // computes relu(w_eff * (x + c) + b) elementwise.
    Rng rng(3);
    AstucCell cell(MixAxis::Time, 1, map_cfg(1), rng);
    cell.map().factor_a().data() = {2.0};
    cell.map().factor_b().data() = {1.0};
    cell.map().bias().data() = {0.25};
    cell.forced_gate() = 1.0;
    double w = cell.map().base().data()[0] + 2.0 * (1.0 / (1.0 + 1e-8));
    Tensor x = Tensor::from_data({1, 1, 2, 1}, {0.5, -4.0});
    Tensor carried = Tensor::zeros({1, 1, 2, 1});
    Tensor y = cell.forward(x, carried);
    EXPECT_NEAR(y.data()[0], std::max(0.0, w * 0.5 + 0.25), 1e-12);
    EXPECT_NEAR(y.data()[1], std::max(0.0, w * -4.0 + 0.25), 1e-12);
}

TEST(Astuc, TimeMixIsNodeEquivariant) {
    // mixing along time treats nodes independently: permuting the node axis
    // commutes with the cell
    Rng rng(4);
    AstucCell cell(MixAxis::Time, 5, map_cfg(), rng);
    Rng frng(10);
    cell.map().factor_b() = Tensor::uniform({5, 2}, -0.5, 0.5, frng, true);
    Tensor x = random_state({1, 5, 3, 2}, 11);
    Tensor carried = random_state({1, 5, 3, 2}, 12);
    Tensor y = cell.forward(x, carried);

    // rotate nodes by one
    auto rotate_nodes = [](const Tensor& t) {
        Shape sh = t.shape();
        std::vector<double> out(t.size());
        std::size_t n = sh[2], c = sh[3];
        const auto& d = t.data();
        for (std::size_t b = 0; b < sh[0]; ++b)
            for (std::size_t s = 0; s < sh[1]; ++s)
                for (std::size_t node = 0; node < n; ++node)
                    for (std::size_t k = 0; k < c; ++k)
                        out[((b * sh[1] + s) * n + (node + 1) % n) * c + k] =
                            d[((b * sh[1] + s) * n + node) * c + k];
        return Tensor::from_data(sh, std::move(out));
    };
    Tensor y_perm = cell.forward(rotate_nodes(x), rotate_nodes(carried));
    Tensor perm_y = rotate_nodes(y);
    for (std::size_t i = 0; i < y.size(); ++i)
        EXPECT_NEAR(y_perm.data()[i], perm_y.data()[i], 1e-12);
}

TEST(Astuc, ShapeChecks) {
    Rng rng(5);
    AstucCell cell(MixAxis::Space, 3, map_cfg(), rng);
    Tensor x = random_state({2, 4, 3, 5}, 13);
    EXPECT_THROW(cell.forward(x, random_state({2, 4, 3, 4}, 14)), ShapeMismatch);
    EXPECT_THROW(cell.forward(random_state({4, 3, 5}, 15), random_state({4, 3, 5}, 16)),
                 ShapeMismatch);
}

TEST(Astuc, ParamCount) {
    Rng rng(6);
    AstucCell cell(MixAxis::Time, 12, map_cfg(3), rng);
    // map factors + bias + gate scalar
    EXPECT_EQ(cell.trainable_param_count(), 3u * (12 + 12) + 12 + 1);
    ParamList params;
    cell.collect_params("cell", params);
    std::size_t counted = 0;
    for (const auto& p : params)
        if (p.trainable) counted += p.tensor.size();
    EXPECT_EQ(counted, cell.trainable_param_count());
}

TEST(MemoryMergeTest, RetainInitAtNineTenths) {
    Rng rng(7);
    MemoryMerge merge(4, rng);
    Tensor retain = merge.retain();
    for (double v : retain.data()) EXPECT_NEAR(v, 0.9, 1e-12);
}

TEST(MemoryMergeTest, HandOracle) {
    Rng rng(8);
    MemoryMerge merge(2, rng);
    merge.bias().data() = {0.5, -0.5};
    merge.forced_retain() = 1.0;
    Tensor gt = Tensor::from_data({1, 1, 1, 2}, {1.0, 2.0});
    Tensor gs = Tensor::from_data({1, 1, 1, 2}, {3.0, 4.0});
    Tensor dw = merge.forward(gt, gs);
    EXPECT_DOUBLE_EQ(dw.data()[0], 4.5);
    EXPECT_DOUBLE_EQ(dw.data()[1], 5.5);

    merge.forced_retain() = 0.0;  // full forget -> zero adaptive matrix
    Tensor dw0 = merge.forward(gt, gs);
    for (double v : dw0.data()) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(MemoryMergeTest, ShapeCheck) {
    Rng rng(9);
    MemoryMerge merge(3, rng);
    EXPECT_THROW(merge.forward(Tensor::zeros({1, 2, 2, 3}), Tensor::zeros({1, 2, 3, 3})),
                 ShapeMismatch);
}
