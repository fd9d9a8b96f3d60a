#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "mdprune/random.hpp"
#include "mdprune/tensor.hpp"

using namespace mdprune;

TEST(Tensor, ShapeAndDataMustAgree) {
    EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
    EXPECT_THROW(Tensor({2, 0}), ShapeError);
    Tensor t({2, 3}, 1.5);
    EXPECT_EQ(t.size(), 6u);
    EXPECT_EQ(t.rows(), 2u);
    EXPECT_EQ(t.cols(), 3u);
}

TEST(Tensor, ExternalDataRejectsNonFinite) {
    EXPECT_THROW(Tensor::from_external({2}, {1.0, std::numeric_limits<double>::quiet_NaN()}), std::invalid_argument);
    EXPECT_THROW(Tensor::from_external({1}, {std::numeric_limits<double>::infinity()}), std::invalid_argument);
    EXPECT_NO_THROW(Tensor::from_external({2}, {1.0, -2.0}));
}

TEST(Tensor, MatrixLiteralAndAccess) {
    const Tensor m = Tensor::matrix({{1, 2}, {3, 4}});
    EXPECT_EQ(m.at(1, 0), 3);
    EXPECT_EQ(m.row(1)[1], 4);
    EXPECT_THROW(Tensor::matrix({{1, 2}, {3}}), ShapeError);
    EXPECT_THROW(m.item(), ShapeError);
    EXPECT_EQ(Tensor::scalar(2.5).item(), 2.5);
}

TEST(Tensor, ReshapeKeepsData) {
    const Tensor m = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
    const Tensor r = m.reshaped({3, 2});
    EXPECT_EQ(r.at(2, 1), 6);
    EXPECT_THROW(m.reshaped({4, 2}), ShapeError);
}

TEST(Tensor, Reductions) {
    const Tensor a = Tensor::matrix({{3, -4}});
    EXPECT_DOUBLE_EQ(frobenius_sq(a), 25);
    EXPECT_DOUBLE_EQ(l1_norm(a), 7);
    EXPECT_DOUBLE_EQ(dot(a, a), 25);
    EXPECT_DOUBLE_EQ(diff_sq(a, Tensor({1, 2})), 25);
    EXPECT_THROW(dot(a, Tensor({2, 1})), ShapeError);
    EXPECT_EQ(sign_of(0.0), 0.0);
    EXPECT_EQ(sign_of(-3.0), -1.0);
}

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 100; ++i) {
        const double x = a.normal();
        EXPECT_EQ(x, b.normal());
        (void)c;
    }
    EXPECT_NE(Rng(1).next_u64(), Rng(2).next_u64());
}

TEST(Rng, BelowAndUniformRanges) {
    Rng r(5);
    for (int i = 0; i < 1000; ++i) {
        EXPECT_LT(r.below(7), 7u);
        const double u = r.uniform();
        EXPECT_GE(u, 0.0);
        EXPECT_LT(u, 1.0);
    }
}

TEST(Rng, NormalMoments) {
    Rng r(9);
    double s = 0, s2 = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double x = r.normal();
        s += x;
        s2 += x * x;
    }
    EXPECT_NEAR(s / n, 0.0, 0.03);
    EXPECT_NEAR(s2 / n, 1.0, 0.05);
}

TEST(Rng, DerivedSeedsDiffer) {
    EXPECT_NE(derive_seed(1, 1), derive_seed(1, 2));
    EXPECT_NE(derive_seed(1, 1), derive_seed(2, 1));
    EXPECT_EQ(derive_seed(3, 4), derive_seed(3, 4));
}
