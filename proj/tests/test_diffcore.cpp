#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "gacan/autodiff.hpp"
#include "gacan/gradcheck.hpp"
#include "gacan/parameters.hpp"
#include "test_support.hpp"

using namespace gacan;
using namespace gacan::ad;
using gacan::testing::analytic_gradient;
using gacan::testing::finite_difference;
using gacan::testing::max_rel_error;
using gacan::testing::random_tensor;

TEST(Tensor, RejectsRankAboveFourAndBadValueCount) {
    EXPECT_THROW(Tensor({1, 1, 1, 1, 1}), DimensionError);
    EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
    EXPECT_THROW(Tensor({2, 0}), DimensionError);
}

TEST(Matmul, IdentityAndDotProduct) {
    Tape tape;
    auto i2 = tape.constant(Tensor::identity(2));
    auto m = tape.constant(Tensor::matrix({{3, 4}, {5, 6}}));
    EXPECT_EQ(matmul(i2, m).value(), Tensor::matrix({{3, 4}, {5, 6}}));

    auto row = tape.constant(Tensor::matrix({{1, 2}}));
    auto col = tape.constant(Tensor::matrix({{3}, {4}}));
    EXPECT_DOUBLE_EQ(matmul(row, col).value().item(), 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
    Tape tape;
    auto a = tape.constant(Tensor({2, 3}));
    auto b = tape.constant(Tensor({2, 3}));
    try {
        matmul(a, b);
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("(2,3) x (2,3)"), std::string::npos) << msg;
    }
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
    const Tensor b = Tensor::identity(2);
    auto f = [&](Tape& t, Var a) { return sum(matmul(a, t.constant(b))); };
    const Tensor a = Tensor({2, 2}, 1.0);
    const Tensor fd = finite_difference(f, a, 1e-6);
    const Tensor an = analytic_gradient(f, a);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_NEAR(fd[i], 1.0, 1e-8);
        EXPECT_DOUBLE_EQ(an[i], 1.0);
    }
}

TEST(Matmul, BatchedRankThree) {
    std::mt19937_64 rng(3);
    Tape tape;
    auto a = tape.constant(random_tensor({2, 3, 4}, rng));
    auto b = tape.constant(random_tensor({2, 4, 5}, rng));
    auto c = matmul(a, b);
    ASSERT_EQ(c.shape(), (Shape{2, 3, 5}));
    for (std::size_t q = 0; q < 2; ++q)
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 5; ++j) {
                double s = 0;
                for (std::size_t p = 0; p < 4; ++p) s += a.value()(q, i, p) * b.value()(q, p, j);
                EXPECT_NEAR(c.value()(q, i, j), s, 1e-14);
            }
}

TEST(Softmax, Examples) {
    Tape tape;
    auto s = softmax(tape.constant(Tensor::vector({0, 0})), 0).value();
    EXPECT_DOUBLE_EQ(s[0], 0.5);
    EXPECT_DOUBLE_EQ(s[1], 0.5);

    auto big = softmax(tape.constant(Tensor::vector({1000, 1000, 1000})), 0).value();
    for (double v : big.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);

    auto q = softmax(tape.constant(Tensor::vector({std::log(1.0), std::log(3.0)})), 0).value();
    EXPECT_NEAR(q[0], 0.25, 1e-15);
    EXPECT_NEAR(q[1], 0.75, 1e-15);

    EXPECT_THROW(softmax(tape.constant(Tensor::vector({1, 2})), 1), DimensionError);
}

TEST(Softmax, SlicesSumToOneAlongEveryAxis) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        Tape tape;
        auto x = tape.constant(random_tensor({3, 4, 5}, rng, -1e3, 1e3));
        for (std::size_t axis = 0; axis < 3; ++axis) {
            const Tensor y = softmax(x, axis).value();
            const Shape& s = y.shape();
            for (std::size_t i = 0; i < s[0]; ++i)
                for (std::size_t j = 0; j < s[1]; ++j)
                    for (std::size_t k = 0; k < s[2]; ++k) {
                        if ((axis == 0 && i) || (axis == 1 && j) || (axis == 2 && k)) continue;
                        double total = 0;
                        for (std::size_t l = 0; l < s[axis]; ++l) {
                            std::size_t ii = axis == 0 ? l : i, jj = axis == 1 ? l : j, kk = axis == 2 ? l : k;
                            EXPECT_GE(y(ii, jj, kk), 0.0);
                            total += y(ii, jj, kk);
                        }
                        EXPECT_NEAR(total, 1.0, 1e-12);
                    }
        }
    }
}

TEST(MaskedSoftmax, MaskedEntriesAreZero) {
    Tape tape;
    Tensor mask = Tensor::matrix({{1, 0, 0}, {1, 1, 0}});
    auto y = masked_softmax(tape.constant(Tensor::matrix({{5, 100, -3}, {0, 0, 9}})), mask, 1).value();
    EXPECT_DOUBLE_EQ(y(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(y(0, 1), 0.0);
    EXPECT_DOUBLE_EQ(y(1, 0), 0.5);
    EXPECT_DOUBLE_EQ(y(1, 2), 0.0);
}

TEST(Activations, LeakyReluReluSigmoid) {
    Tape tape;
    auto lr = leaky_relu(tape.constant(Tensor::vector({3, -1, 0})), 0.2).value();
    EXPECT_DOUBLE_EQ(lr[0], 3.0);
    EXPECT_DOUBLE_EQ(lr[1], -0.2);
    EXPECT_DOUBLE_EQ(lr[2], 0.0);
    EXPECT_THROW(leaky_relu(tape.constant(Tensor::vector({1})), 1.0), ValidationError);

    auto r = relu(tape.constant(Tensor::vector({-2, 0, 5}))).value();
    EXPECT_EQ(r, Tensor::vector({0, 0, 5}));
    auto rn = relu(tape.constant(Tensor::vector({-1, -2, -3}))).value();
    EXPECT_EQ(rn, Tensor::vector({0, 0, 0}));

    auto s = sigmoid(tape.constant(Tensor::vector({0, 800, std::log(3.0), -800}))).value();
    EXPECT_DOUBLE_EQ(s[0], 0.5);
    EXPECT_LE(s[1], 1.0);
    EXPECT_GT(s[1], 1.0 - 1e-12);
    EXPECT_NEAR(s[2], 0.75, 1e-15);
    EXPECT_GE(s[3], 0.0);
}

TEST(Activations, ReluGradientAwayFromKink) {
    auto f = [](Tape&, Var x) { return sum(relu(x)); };
    const Tensor x = Tensor::vector({2, -2});
    const Tensor fd = finite_difference(f, x, 1e-6);
    EXPECT_NEAR(fd[0], 1.0, 1e-9);
    EXPECT_NEAR(fd[1], 0.0, 1e-9);
    const Tensor an = analytic_gradient(f, x);
    EXPECT_EQ(an, Tensor::vector({1, 0}));
    // Subgradient at exactly zero.
    EXPECT_EQ(analytic_gradient(f, Tensor::vector({0.0})), Tensor::vector({0.0}));
}

TEST(LayerNorm, Examples) {
    Tape tape;
    auto one2 = tape.constant(Tensor({2}, 1.0));
    auto zero2 = tape.constant(Tensor({2}, 0.0));
    auto y = layer_norm(tape.constant(Tensor::vector({1, 3})), one2, zero2, 1e-14).value();
    EXPECT_NEAR(y[0], -1.0, 1e-12);
    EXPECT_NEAR(y[1], 1.0, 1e-12);

    auto one3 = tape.constant(Tensor({3}, 1.0));
    auto zero3 = tape.constant(Tensor({3}, 0.0));
    auto c = layer_norm(tape.constant(Tensor::vector({5, 5, 5})), one3, zero3).value();
    EXPECT_EQ(c, Tensor::vector({0, 0, 0}));

    auto bias = tape.constant(Tensor::vector({1, 2, 3}));
    auto g0 = layer_norm(tape.constant(Tensor::vector({4, -7, 9})), zero3, bias).value();
    EXPECT_EQ(g0, Tensor::vector({1, 2, 3}));
}

TEST(LayerNorm, NormalizedSlicesHaveZeroMeanUnitVariance) {
    std::mt19937_64 rng(5);
    Tape tape;
    auto x = tape.constant(random_tensor({6, 7}, rng));
    auto y = layer_norm(x, tape.constant(Tensor({7}, 1.0)), tape.constant(Tensor({7}, 0.0)), 1e-14).value();
    for (std::size_t r = 0; r < 6; ++r) {
        double mu = 0, var = 0;
        for (std::size_t j = 0; j < 7; ++j) mu += y(r, j) / 7.0;
        for (std::size_t j = 0; j < 7; ++j) var += (y(r, j) - mu) * (y(r, j) - mu) / 7.0;
        EXPECT_NEAR(mu, 0.0, 1e-9);
        EXPECT_NEAR(var, 1.0, 1e-9);
    }
}

TEST(Concat, ExamplesAndSplitRoundTrip) {
    Tape tape;
    auto a = tape.constant(Tensor::matrix({{1}}));
    auto b = tape.constant(Tensor::matrix({{2}}));
    EXPECT_EQ(concat({a, b}, 0).value(), Tensor::matrix({{1}, {2}}));
    EXPECT_EQ(concat({a}, 0).value(), a.value());

    std::mt19937_64 rng(9);
    auto p = tape.constant(random_tensor({2, 3, 4}, rng));
    auto q = tape.constant(random_tensor({2, 5, 4}, rng));
    auto parts = split(concat({p, q}, 1), 1, {3, 5});
    EXPECT_EQ(parts[0].value(), p.value());
    EXPECT_EQ(parts[1].value(), q.value());
    EXPECT_THROW(concat({p, tape.constant(Tensor({3, 3, 4}))}, 1), DimensionError);
}

TEST(FullyConnected, Examples) {
    Tape tape;
    auto x = tape.constant(Tensor::matrix({{1, 2}}));
    auto id = fully_connected(x, tape.constant(Tensor::identity(2)), tape.constant(Tensor({2}, 0.0)), 0.2);
    EXPECT_EQ(id.value(), x.value());

    auto w0 = fully_connected(x, tape.constant(Tensor({2, 3}, 0.0)), tape.constant(Tensor::vector({1, -1, 0})), 0.2);
    EXPECT_EQ(w0.value(), Tensor::matrix({{1, -0.2, 0}}));

    auto neg = fully_connected(tape.constant(Tensor::matrix({{1, 1}})), tape.constant(Tensor::matrix({{1}, {-3}})),
                               tape.constant(Tensor::vector({0})), 0.2);
    EXPECT_NEAR(neg.value().item(), -0.4, 1e-15);

    EXPECT_THROW(fully_connected(x, tape.constant(Tensor({3, 1})), tape.constant(Tensor({1})), 0.2), DimensionError);
}

TEST(Backward, SumAndQuadratic) {
    ParameterStore store;
    store.add("p", Tensor::vector({1, 2}));
    store.add("unused", Tensor::vector({7}));
    {
        Tape tape;
        tape.parameter(store, "unused");
        tape.backward(sum(tape.parameter(store, "p")));
        EXPECT_EQ(store.grad("p"), Tensor::vector({1, 1}));
        EXPECT_EQ(store.grad("unused"), Tensor::vector({0}));
    }
    {
        Tape tape;
        auto p = tape.parameter(store, "p");
        tape.backward(sum(mul(p, p)));
        EXPECT_EQ(store.grad("p"), Tensor::vector({2, 4}));
    }
}

TEST(Backward, NonScalarLossIsContractError) {
    Tape tape;
    auto v = tape.variable(Tensor::vector({1, 2}));
    EXPECT_THROW(tape.backward(v), ContractError);
}

TEST(Backward, LinearInIndependentSubgraphs) {
    std::mt19937_64 rng(21);
    const Tensor a0 = random_tensor({3, 3}, rng);
    const Tensor b0 = random_tensor({3, 3}, rng);
    auto g1 = [&](Tape& t, Var x) { return sum(sigmoid(matmul(x, t.constant(a0)))); };
    auto g2 = [&](Tape& t, Var x) { return sum(square(matmul(t.constant(b0), x))); };
    const Tensor x = random_tensor({3, 3}, rng);
    const Tensor sep1 = analytic_gradient(g1, x);
    const Tensor sep2 = analytic_gradient(g2, x);
    const Tensor both = analytic_gradient([&](Tape& t, Var v) { return add(g1(t, v), g2(t, v)); }, x);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(both[i], sep1[i] + sep2[i], 1e-13);
}

TEST(Backward, DeterministicBitIdentical) {
    std::mt19937_64 rng(4);
    const Tensor x = random_tensor({4, 5}, rng);
    const Tensor w = random_tensor({5, 3}, rng);
    auto f = [&](Tape& t, Var v) {
        return sum(layer_norm(softmax(matmul(v, t.constant(w)), 1), t.constant(Tensor({3}, 1.0)),
                              t.constant(Tensor({3}, 0.5))));
    };
    EXPECT_EQ(analytic_gradient(f, x), analytic_gradient(f, x));
}

TEST(GradCheck, LinearModelIsExact) {
    std::mt19937_64 rng(8);
    ParameterStore store;
    store.add("w", random_tensor({3, 2}, rng));
    store.add("b", random_tensor({2}, rng));
    const Tensor x = random_tensor({5, 3}, rng);
    LossFn loss = [&](Tape& t, ParameterStore& s) {
        return sum(add_bias(matmul(t.constant(x), t.parameter(s, "w")), t.parameter(s, "b")));
    };
    auto report = grad_check(loss, store, 1e-5, 1e-9);
    EXPECT_TRUE(report.passed()) << report.worst();
    EXPECT_EQ(report.entries.size(), 2u);
}

TEST(GradCheck, CorruptedBackwardIsReported) {
    ParameterStore store;
    store.add("p", Tensor::vector({0.3, -0.7, 1.1}));
    LossFn loss = [](Tape& t, ParameterStore& s) {
        auto p = t.parameter(s, "p");
        Tensor v = p.value();
        for (auto& e : v.raw()) e = e * e;
        // Square with a deliberately wrong derivative (x instead of 2x).
        Tensor saved = p.value();
        auto bad = t.record(v, {p}, [saved](const Tensor& g, std::span<Tensor* const> gi) {
            if (gi[0])
                for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * saved[i];
        });
        return sum(bad);
    };
    auto report = grad_check(loss, store, 1e-6, 1e-5);
    EXPECT_FALSE(report.passed());
    EXPECT_NEAR(report.worst(), 0.5, 1e-6);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> mant(-1.0, 1.0);
    std::uniform_int_distribution<int> expo(-300, 300);
    ParameterStore store;
    for (int k = 0; k < 5; ++k) {
        Tensor t({3, 4});
        for (auto& v : t.raw()) v = std::ldexp(mant(rng), expo(rng));
        store.add("layer" + std::to_string(k) + ".W", t);
    }
    store.add("tiny", Tensor::vector({5e-324, -0.0, 1.0 / 3.0}));
    Checkpoint ck{{{"N", "8"}, {"mode", "fused-dilated"}}, store};
    std::stringstream ss(checkpoint_to_string(ck));
    Checkpoint back = read_checkpoint(ss);
    EXPECT_TRUE(back.params == store);
    ASSERT_NE(back.find("N"), nullptr);
    EXPECT_EQ(*back.find("mode"), "fused-dilated");
    EXPECT_EQ(checkpoint_to_string(back), checkpoint_to_string(ck));
}

TEST(Checkpoint, RejectsMissingHeaderAndBadLines) {
    std::stringstream bad1("not a checkpoint\n");
    EXPECT_THROW(read_checkpoint(bad1), ParseError);
    std::stringstream bad2("gacan-checkpoint v1\nw 2,2 1,2,3\n");
    EXPECT_THROW(read_checkpoint(bad2), ParseError);
}

TEST(ParameterStore, DuplicateNamesRejected) {
    ParameterStore s;
    s.add("a", Tensor({1}));
    EXPECT_THROW(s.add("a", Tensor({1})), ValidationError);
    EXPECT_THROW(s.add("has space", Tensor({1})), ValidationError);
}
