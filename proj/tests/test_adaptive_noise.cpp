#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "matchs/adaptive_noise.hpp"
#include "matchs/rng.hpp"
#include "oracles.hpp"

using namespace matchs;

namespace {

std::vector<double> random_series(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.gaussian();
    return v;
}

}  // namespace

TEST(LocalVariance, HandExamples) {
    const std::vector<double> s = {0, 2, 0};
    const auto v = local_variance(s, 1);
    EXPECT_DOUBLE_EQ(v[1], 8.0 / 3.0);
    EXPECT_DOUBLE_EQ(v[0], 4.0 / 2.0);  // window truncated to {0, 1}
    const std::vector<double> flat(7, 3.5);
    for (double x : local_variance(flat, 2)) EXPECT_EQ(x, 0.0);
    EXPECT_THROW(local_variance(std::vector<double>{}, 1), ContractError);
}

TEST(LocalVariance, SpikeIsArgmaxAndShiftInvariant) {
    std::vector<double> s(20, 1.0);
    s[11] = 5.0;
    const auto v = local_variance(s, 2);
    EXPECT_EQ(std::max_element(v.begin(), v.end()) - v.begin(), 11);
    Rng rng(1);
    const auto r = random_series(rng, 30);
    std::vector<double> shifted = r;
    for (double& x : shifted) x += 17.0;
    const auto a = local_variance(r, 3), b = local_variance(shifted, 3);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_GE(a[i], 0.0);
        EXPECT_NEAR(a[i], b[i], 1e-10);
    }
}

TEST(NormalizeVariance, Examples) {
    EXPECT_EQ(normalize_variance(std::vector<double>{1, 2, 4}), (std::vector<double>{0.25, 0.5, 1.0}));
    EXPECT_EQ(normalize_variance(std::vector<double>{0, 0, 0}), (std::vector<double>{0, 0, 0}));
}

TEST(Dtw, MatchesBruteForceAndBasicProperties) {
    Rng rng(2);
    for (int i = 0; i < 100; ++i) {
        const auto a = random_series(rng, 1 + rng.uniform_int(6));
        const auto b = random_series(rng, 1 + rng.uniform_int(6));
        EXPECT_NEAR(dtw(a, b), oracle::dtw_brute_force(a, b), 1e-9);
        EXPECT_DOUBLE_EQ(dtw(a, b), dtw(b, a));
        EXPECT_EQ(dtw(a, a), 0.0);
        EXPECT_GE(dtw(a, b), 0.0);
    }
    EXPECT_THROW(dtw(std::vector<double>{}, std::vector<double>{1.0}), ContractError);
}

TEST(Influence, Conventions) {
    const std::vector<std::vector<double>> series = {{1, 2, 3}, {1, 2, 3}, {5, 5, 5}};
    EXPECT_DOUBLE_EQ(intra_cluster_influence(series, {0, 0, 1}, 0), 1.0);  // identical mate
    EXPECT_DOUBLE_EQ(intra_cluster_influence(series, {0, 0, 1}, 2), 1.0);  // singleton
}

TEST(Influence, ThreeStockClusterMatchesOracle) {
    const std::vector<std::vector<double>> series = {{0, 1, 0, 2}, {1, 1, 2, 0}, {3, 0, 1, 1}};
    const std::vector<int> labels = {0, 0, 0};
    for (std::size_t i = 0; i < 3; ++i) {
        std::vector<double> mean(4, 0.0);
        for (std::size_t j = 0; j < 3; ++j)
            if (j != i)
                for (std::size_t t = 0; t < 4; ++t) mean[t] += series[j][t] / 2.0;
        EXPECT_NEAR(intra_cluster_influence(series, labels, i), 1.0 / (1.0 + oracle::dtw_brute_force(series[i], mean)),
                    1e-12);
    }
}

TEST(IntegratedScore, MixingCollapses) {
    Rng rng(3);
    std::vector<std::vector<double>> series;
    for (int i = 0; i < 4; ++i) series.push_back(random_series(rng, 12));
    const std::vector<int> labels = {0, 0, 1, 1};
    // alpha = 1: per-stock normalised variance, then the grid max (which is 1) leaves it unchanged
    const SignificanceScore s1 = integrated_score(series, labels, 1.0, 2);
    for (std::size_t i = 0; i < 4; ++i) {
        const auto vn = normalize_variance(local_variance(series[i], 2));
        for (std::size_t t = 0; t < 12; ++t) EXPECT_NEAR(s1.at(i, t), vn[t], 1e-15);
    }
    // alpha = 0 with identical cluster mates (influence 1): normalised cluster variance
    std::vector<std::vector<double>> twins = {series[0], series[0], series[2], series[2]};
    const SignificanceScore s0 = integrated_score(twins, labels, 0.0, 2);
    const auto c0 = normalize_variance(local_variance(series[0], 2));
    for (std::size_t t = 0; t < 12; ++t) EXPECT_NEAR(s0.at(1, t), c0[t], 1e-12);
    EXPECT_THROW(integrated_score(series, labels, 1.5, 2), ConfigError);
}

TEST(IntegratedScore, RangeAndScaleCovariance) {
    Rng rng(4);
    std::vector<std::vector<double>> series;
    for (int i = 0; i < 6; ++i) series.push_back(random_series(rng, 20));
    const std::vector<int> labels = {0, 0, 0, 1, 1, 1};
    const SignificanceScore s = integrated_score(series, labels, 0.5, 2);
    EXPECT_DOUBLE_EQ(*std::max_element(s.values.begin(), s.values.end()), 1.0);
    EXPECT_GE(*std::min_element(s.values.begin(), s.values.end()), 0.0);
    // the alpha term is unchanged by scaling every series
    auto scaled = series;
    for (auto& row : scaled)
        for (double& x : row) x *= 3.0;
    const SignificanceScore a = integrated_score(series, labels, 1.0, 2), b = integrated_score(scaled, labels, 1.0, 2);
    for (std::size_t i = 0; i < a.values.size(); ++i) EXPECT_NEAR(a.values[i], b.values[i], 1e-12);
}

TEST(IntegratedScore, SpikesRankInTopDecile) {
    Rng rng(5);
    SynthParams p;
    p.indicators = {"close"};
    SyntheticMarket m = synth_market(8, 2, 200, rng, p);
    // inject a large jump into every member of cluster 0 at t = 120
    std::vector<double> v = m.panel.values.values();
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t t = 120; t < 200; ++t) v[i * 200 + t] *= 1.25;
    m.panel.values = Tensor(m.panel.values.shape(), v);
    const SignificanceScore s = integrated_score(m.panel, m.cluster_labels, 0, 0.5, 2);
    const auto per_t = s.per_timepoint();
    std::vector<double> sorted = per_t;
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    const double decile = sorted[sorted.size() / 10];
    EXPECT_GE(per_t[120], decile);
    EXPECT_GE(per_t[119], decile);
}

TEST(Schedule, GammaZeroIsVanilla) {
    Rng rng(6);
    const SignificanceScore s{2, 9, std::vector<double>(18), 0.5, 2};
    SignificanceScore noisy = s;
    for (double& x : noisy.values) x = rng.uniform();
    const NoiseSchedule sched = build_schedule(noisy, 50, 0.2, 0.0);
    const oracle::VanillaDdpm ref(50, 0.2);
    for (std::size_t k = 1; k <= 50; ++k)
        for (std::size_t t = 0; t < 9; ++t) {
            EXPECT_NEAR(sched.beta(k, t), ref.beta[k - 1], 1e-12);
            EXPECT_NEAR(sched.alpha_bar(k, t), ref.alpha_bar[k - 1], 1e-12);
        }
}

TEST(Schedule, MidpointScoreIsNeutral) {
    const NoiseSchedule a = build_schedule(uniform_significance(3, 5, 0.5), 20, 0.3, 0.7);
    const NoiseSchedule b = build_schedule(uniform_significance(3, 5, 0.1), 20, 0.3, 0.0);
    for (std::size_t i = 0; i < a.betas.size(); ++i) EXPECT_NEAR(a.betas[i], b.betas[i], 1e-15);
}

TEST(Schedule, BoundsMonotonicityAndTerminalCorruption) {
    Rng rng(7);
    SignificanceScore s{3, 11, std::vector<double>(33), 0.5, 2};
    for (double& x : s.values) x = rng.uniform();
    const NoiseSchedule sched = build_schedule(s, 100, 0.2, 0.5);
    for (std::size_t t = 0; t < 11; ++t) {
        for (std::size_t k = 1; k <= 100; ++k) {
            EXPECT_GT(sched.beta(k, t), 0.0);
            EXPECT_LT(sched.beta(k, t), 1.0);
            if (k > 1) EXPECT_LT(sched.alpha_bar(k, t), sched.alpha_bar(k - 1, t));
        }
    }
    const NoiseSchedule vanilla = build_schedule(s, 100, 0.2, 0.0);
    for (std::size_t t = 0; t < 11; ++t) EXPECT_LT(vanilla.alpha_bar(100, t), 0.01);
}

TEST(Schedule, ConstantScoreGivesIdenticalColumns) {
    const NoiseSchedule sched = build_schedule(uniform_significance(2, 6, 0.9), 30, 0.2, 0.4);
    for (std::size_t k = 1; k <= 30; ++k)
        for (std::size_t t = 1; t < 6; ++t) EXPECT_EQ(sched.beta(k, t), sched.beta(k, 0));
}

TEST(Schedule, ValidatesBounds) {
    const auto s = uniform_significance(1, 3, 0.5);
    try {
        build_schedule(s, 10, 1.5, 0.5);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_EQ(e.field(), "beta_base_max");
    }
    EXPECT_THROW(build_schedule(s, 10, 0.2, -0.1), ConfigError);
    EXPECT_THROW(build_schedule(s, 0, 0.2, 0.5), ConfigError);
}
