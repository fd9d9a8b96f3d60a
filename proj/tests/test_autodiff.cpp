#include <gtest/gtest.h>

#include <cmath>

#include "fd.hpp"
#include "mdprune/autodiff.hpp"
#include "mdprune/random.hpp"
#include "random_nets.hpp"

using namespace mdprune;

TEST(Primitive, MatmulIdentity) {
    const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
    const Tensor i = Tensor::matrix({{1, 0}, {0, 1}});
    const Tensor ins[] = {a, i};
    EXPECT_EQ(forward_primitive(OpKind::Matmul, ins), a);
}

TEST(Primitive, FrobeniusSquared) {
    const Tensor ins[] = {Tensor::matrix({{3, 4}})};
    EXPECT_DOUBLE_EQ(forward_primitive(OpKind::FrobeniusSq, ins).item(), 25.0);
}

TEST(Primitive, CrossEntropyOfUniformLogits) {
    OpAttrs at;
    at.indices = {2};
    const Tensor ins[] = {Tensor({1, 4}, 0.7)};
    EXPECT_NEAR(forward_primitive(OpKind::CrossEntropyWithLogits, ins, at).item(), std::log(4.0), 1e-12);
}

TEST(Primitive, ShapeMismatchNamesBothShapes) {
    const Tensor ins[] = {Tensor({2, 3}), Tensor({4, 5})};
    try {
        forward_primitive(OpKind::Matmul, ins);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
        EXPECT_NE(msg.find("[4x5]"), std::string::npos) << msg;
    }
    const Tensor add[] = {Tensor({2, 2}), Tensor({2, 3})};
    EXPECT_THROW(forward_primitive(OpKind::Add, add), ShapeError);
}

TEST(Primitive, WrongArity) {
    const Tensor one[] = {Tensor({2, 2})};
    EXPECT_THROW(forward_primitive(OpKind::Matmul, one), std::invalid_argument);
}

TEST(Primitive, CausalSoftmaxMasksFuture) {
    const Tensor ins[] = {Tensor({4, 4}, 1.0)};
    OpAttrs at;
    at.causal_segment = 2;
    const Tensor s = forward_primitive(OpKind::RowSoftmax, ins, at);
    EXPECT_DOUBLE_EQ(s.at(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(s.at(0, 1), 0.0);
    EXPECT_DOUBLE_EQ(s.at(1, 0), 0.5);
    EXPECT_DOUBLE_EQ(s.at(2, 1), 0.0);  // other segment
    EXPECT_DOUBLE_EQ(s.at(2, 2), 1.0);
}

TEST(Backward, SquareAtThree) {
    Tape t;
    Var x = t.leaf(Tensor::scalar(3.0));
    Var y = x * x;
    EXPECT_DOUBLE_EQ(t.backward(y)[x].item(), 6.0);
}

TEST(Backward, AlignmentQuadratic) {
    // 1/2 ||Gamma - c W||^2 at W = 1, Gamma = 0, c = 2: gradient c^2 W - c Gamma = 4
    Tape t;
    Var w = t.leaf(Tensor::scalar(1.0));
    Var gamma = t.constant(Tensor::scalar(0.0));
    Var loss = 0.5 * frobenius_sq(gamma - 2.0 * w);
    const double g = t.backward(loss)[w].item();
    EXPECT_NEAR(g, 4.0, 1e-12);
    const auto f = [](const Tensor& x) { return 0.5 * (0.0 - 2.0 * x[0]) * (0.0 - 2.0 * x[0]); };
    EXPECT_NEAR(testing_util::central_diff(f, Tensor::scalar(1.0))[0], g, 1e-8);
}

TEST(Backward, ForeignOutputRejected) {
    Tape a, b;
    Var x = a.leaf(Tensor::scalar(1.0));
    Var y = x * x;
    EXPECT_THROW(b.backward(y), std::logic_error);
}

TEST(Backward, NonScalarNeedsSeed) {
    Tape t;
    Var x = t.leaf(Tensor({2, 2}, 1.0));
    Var y = x * x;
    EXPECT_THROW(t.backward(y), std::exception);
    const auto g = t.backward(y, Tensor({2, 2}, 1.0));
    EXPECT_DOUBLE_EQ(g[x][3], 2.0);
}

TEST(Backward, UnreachedLeafHasZeroGradient) {
    Tape t;
    Var x = t.leaf(Tensor::scalar(2.0));
    Var unused = t.leaf(Tensor({2, 2}, 5.0));
    const auto g = t.backward(x * x);
    EXPECT_EQ(g[unused], Tensor({2, 2}));
}

TEST(Backward, AbsHasZeroSubgradientAtZero) {
    Tape t;
    Var x = t.leaf(Tensor::matrix({{0.0, -2.0, 3.0}}));
    const auto g = t.backward(abs(x), Tensor({1, 3}, 1.0));
    EXPECT_EQ(g[x], Tensor::matrix({{0.0, -1.0, 1.0}}));
}

class PerOpFiniteDiff : public ::testing::TestWithParam<int> {};

// Each op wrapped so the output is reduced to a scalar by a fixed random cotangent.
TEST_P(PerOpFiniteDiff, MatchesCentralDifferences) {
    const int op = GetParam();
    Rng rng(1000 + op);
    for (int trial = 0; trial < 100; ++trial) {
        const Tensor a = rng.uniform_tensor({3, 3}, -2, 2);
        const Tensor b = rng.uniform_tensor({3, 3}, -2, 2);
        const Tensor cot = rng.uniform_tensor({3, 3}, -1, 1);
        const std::vector<std::size_t> labels{0, 2, 1};
        auto build = [&](Tape& t, Var x, Var y) -> Var {
            Var out;
            switch (op) {
                case 0: out = matmul(x, y); break;
                case 1: out = transpose(x); break;
                case 2: out = x + y; break;
                case 3: out = x - y; break;
                case 4: out = x * y; break;
                case 5: out = 1.7 * x; break;
                case 6: out = abs(x); break;
                case 7: out = relu(x); break;
                case 8: out = row_softmax(x); break;
                case 9: out = row_softmax(x, 3); break;
                case 10: return cross_entropy_with_logits(x, labels);
                case 11: return frobenius_sq(x);
                default: out = gather_rows(x, {2, 0, 2}); break;
            }
            return frobenius_sq(out * t.constant(cot) + t.constant(Tensor({3, 3}, 0.0)));
        };
        auto value = [&](const Tensor& x, const Tensor& y) {
            Tape t;
            return build(t, t.leaf(x), t.leaf(y)).value().item();
        };
        Tape t;
        Var x = t.leaf(a), y = t.leaf(b);
        const auto g = t.backward(build(t, x, y));
        const Tensor fx = testing_util::central_diff([&](const Tensor& v) { return value(v, b); }, a);
        const Tensor fy = testing_util::central_diff([&](const Tensor& v) { return value(a, v); }, b);
        EXPECT_LE(testing_util::rel_error(g[x], fx), 1e-4) << "op " << op << " trial " << trial;
        EXPECT_LE(testing_util::rel_error(g[y], fy), 1e-4) << "op " << op << " trial " << trial;
    }
}

INSTANTIATE_TEST_SUITE_P(AllOps, PerOpFiniteDiff, ::testing::Range(0, 13));

TEST(Backward, RandomNetsMatchFiniteDifferences) {
    for (std::uint64_t s = 0; s < 100; ++s) {
        const auto net = testing_util::RandomNet::make(s);
        EXPECT_LE(net.max_fd_error(), 1e-4) << "net seed " << s;
    }
}

TEST(Backward, Linearity) {
    Rng rng(3);
    const Tensor a = rng.uniform_tensor({3, 4}, -2, 2);
    const Tensor b = rng.uniform_tensor({4, 2}, -2, 2);
    auto grad_of = [&](double ca, double cb) {
        Tape t;
        Var x = t.leaf(a);
        Var y = t.constant(b);
        Var f = frobenius_sq(matmul(x, y));
        Var g = cross_entropy_with_logits(matmul(x, y), {0, 1, 1});
        Var combo = t.apply(OpKind::Add, {ca * f, cb * g});
        return t.backward(combo)[x];
    };
    const Tensor lhs = grad_of(0.3, -1.2);
    const Tensor f = grad_of(1, 0), g = grad_of(0, 1);
    for (std::size_t i = 0; i < lhs.size(); ++i) EXPECT_NEAR(lhs[i], 0.3 * f[i] - 1.2 * g[i], 1e-10);
}

TEST(Forward, Deterministic) {
    const auto net = testing_util::RandomNet::make(17);
    EXPECT_EQ(net.loss(net.params), net.loss(net.params));
    EXPECT_EQ(net.grads()[2], net.grads()[2]);
}
