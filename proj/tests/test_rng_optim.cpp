#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "matchs/optim.hpp"
#include "matchs/rng.hpp"

using namespace matchs;

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, NamedStreamsAndForksDiffer) {
    Rng a = Rng::stream(7, "data"), b = Rng::stream(7, "init");
    EXPECT_NE(a.next_u64(), b.next_u64());
    Rng base(3);
    Rng f0 = base.fork(0), f1 = base.fork(1), f0b = base.fork(0);
    const auto x = f0.next_u64();
    EXPECT_NE(x, f1.next_u64());
    EXPECT_EQ(x, f0b.next_u64());
}

TEST(Rng, UniformIntInRangeAndCoversAll) {
    Rng r(5);
    std::vector<int> seen(7, 0);
    for (int i = 0; i < 7000; ++i) {
        const auto v = r.uniform_int(7);
        ASSERT_LT(v, 7u);
        ++seen[v];
    }
    for (int c : seen) EXPECT_GT(c, 850);
}

TEST(Rng, GaussianMoments) {
    Rng r(11);
    const int n = 200000;
    double s = 0, s2 = 0, s4 = 0;
    for (int i = 0; i < n; ++i) {
        const double g = r.gaussian();
        s += g;
        s2 += g * g;
        s4 += g * g * g * g;
    }
    const double mean = s / n, var = s2 / n - mean * mean;
    // 4 sigma bands on the sample mean, variance and fourth moment
    EXPECT_NEAR(mean, 0.0, 4.0 / std::sqrt(n));
    EXPECT_NEAR(var, 1.0, 4.0 * std::sqrt(2.0 / n));
    EXPECT_NEAR(s4 / n, 3.0, 4.0 * std::sqrt(96.0 / n));
}

TEST(Adam, MinimisesSquare) {
    Tensor w = parameter({1}, {1.0});
    AdamState state;
    std::vector<Tensor> params{w};
    for (int i = 0; i < 500; ++i) {
        zero_grads(params);
        backward(square(w));
        adam_step(params, 0.1, state);
    }
    EXPECT_LT(std::abs(w.values()[0]), 1e-3);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
    Tensor w = parameter({3}, {0.5, -1.0, 2.0});
    AdamState state;
    std::vector<Tensor> params{w};
    for (int i = 0; i < 3; ++i) {
        zero_grads(params);
        backward(scale(sum(w), 0.0));
        adam_step(params, 0.1, state);
    }
    EXPECT_EQ(w.values(), (std::vector<double>{0.5, -1.0, 2.0}));
}

TEST(Adam, FirstStepHasLearningRateMagnitude) {
    // bias-corrected first step is lr * g / (|g| + eps') = lr * sign(g)
    Tensor w = parameter({2}, {1.0, -2.0});
    AdamState state;
    std::vector<Tensor> params{w};
    backward(sum(mul(w, Tensor({2}, {3.0, -0.5}))));
    adam_step(params, 0.01, state);
    EXPECT_NEAR(w.values()[0], 1.0 - 0.01, 1e-9);
    EXPECT_NEAR(w.values()[1], -2.0 + 0.01, 1e-9);
}

TEST(Adam, RejectsNonPositiveLearningRate) {
    Tensor w = parameter({1}, {1.0});
    AdamState state;
    std::vector<Tensor> params{w};
    EXPECT_THROW(adam_step(params, 0.0, state), ContractError);
}

TEST(LearningRate, DecaysPerEpoch) {
    DecayingLearningRate lr(1e-3, 0.5);
    EXPECT_DOUBLE_EQ(lr.current(), 1e-3);
    lr.on_epoch_end();
    lr.on_epoch_end();
    EXPECT_DOUBLE_EQ(lr.current(), 2.5e-4);
}
