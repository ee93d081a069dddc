#include <gtest/gtest.h>

#include <cmath>
#include <memory>
#include <set>

#include "fd_check.hpp"
#include "matchs/denoiser.hpp"
#include "matchs/diffusion.hpp"
#include "matchs/rng.hpp"

using namespace matchs;

namespace {

DenoiserConfig mini(std::size_t masked = 2, std::size_t unmasked = 1) {
    DenoiserConfig c;
    c.n_indicators = 2;
    c.length = 5;
    c.d_model = 8;
    c.n_masked_heads = masked;
    c.n_unmasked_heads = unmasked;
    c.head_dim = 4;
    c.n_encoder_layers = 2;
    c.ff_dim = 8;
    c.dilations = {1, 2};
    c.steps = 10;
    c.emb_dim = 8;
    return c;
}

Tensor random_tensor(Shape shape, Rng& rng) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = rng.gaussian();
    return Tensor(std::move(shape), std::move(v));
}

// History with the last `horizon` positions zeroed.
ConditioningBundle bundle_for(const Tensor& target, std::size_t horizon, std::shared_ptr<const HeadMaskSet> masks) {
    TrainingInstance inst;
    inst.target = target;
    const std::size_t len = target.dim(2);
    inst.future_mask.assign(len, 0);
    for (std::size_t t = len - horizon; t < len; ++t) inst.future_mask[t] = 1;
    return make_bundle(inst, std::move(masks));
}

Tensor permute_stocks(const Tensor& x, const std::vector<std::size_t>& perm) {
    const std::size_t per = x.numel() / x.dim(0);
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < perm.size(); ++i)
        for (std::size_t j = 0; j < per; ++j) out[i * per + j] = x.values()[perm[i] * per + j];
    return Tensor(x.shape(), std::move(out));
}

BinaryMatrix permute_mask(const BinaryMatrix& m, const std::vector<std::size_t>& perm) {
    BinaryMatrix out(m.n);
    for (std::size_t i = 0; i < m.n; ++i)
        for (std::size_t j = 0; j < m.n; ++j) out.set(i, j, m.at(perm[i], perm[j]));
    return out;
}

}  // namespace

TEST(NoiseEmbedding, ValuesAndDistinctness) {
    const auto z = noise_embedding(0.0, 8);
    for (std::size_t s = 0; s < 4; ++s) {
        EXPECT_EQ(z[2 * s], 1.0);
        EXPECT_EQ(z[2 * s + 1], 0.0);
    }
    std::vector<std::vector<double>> all;
    for (int k = 1; k <= 100; ++k) {
        all.push_back(noise_embedding(k, 64));
        for (double v : all.back()) {
            EXPECT_GE(v, -1.0);
            EXPECT_LE(v, 1.0);
        }
    }
    for (std::size_t a = 0; a < all.size(); ++a)
        for (std::size_t b = a + 1; b < all.size(); ++b) {
            double linf = 0.0;
            for (std::size_t i = 0; i < 64; ++i) linf = std::max(linf, std::abs(all[a][i] - all[b][i]));
            EXPECT_GT(linf, 1e-6);
        }
    EXPECT_THROW(noise_embedding(1, 7), ConfigError);
}

TEST(MaskedAttention, IdentityAllOnesAndForbiddenPair) {
    Rng rng(1);
    const Tensor q = random_tensor({3, 4}, rng), k = random_tensor({3, 4}, rng), v = random_tensor({3, 2}, rng);
    EXPECT_EQ(masked_attention(q, k, v, BinaryMatrix::identity(3)).values(), v.values());
    BinaryMatrix ones(3);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) ones.set(i, j, 1);
    EXPECT_EQ(masked_attention(q, k, v, ones).values(), attention(q, k, v).values());

    BinaryMatrix m = ones;
    m.set(0, 2, 0);
    const Tensor out = masked_attention(q, k, v, m);
    // row 0 by hand: softmax over the admissible keys {0, 1}
    double s[2];
    for (std::size_t j = 0; j < 2; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < 4; ++c) dot += q.values()[c] * k.values()[j * 4 + c];
        s[j] = std::exp(dot / 2.0);
    }
    const double w0 = s[0] / (s[0] + s[1]), w1 = s[1] / (s[0] + s[1]);
    for (std::size_t c = 0; c < 2; ++c)
        EXPECT_NEAR(out.values()[c], w0 * v.values()[c] + w1 * v.values()[2 + c], 1e-12);
}

TEST(MaskedAttention, RowsSumToOne) {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 2 + rng.uniform_int(6);
        BinaryMatrix m = BinaryMatrix::identity(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (rng.uniform() < 0.4) m.set(i, j, 1);
        const Tensor q = random_tensor({n, 3}, rng), k = random_tensor({n, 3}, rng);
        // with V = ones every output entry is the row sum of the weights
        const Tensor out = masked_attention(q, k, Tensor(Shape{n, 1}, std::vector<double>(n, 1.0)), m);
        for (double x : out.values()) EXPECT_NEAR(x, 1.0, 1e-10);
    }
}

TEST(TemporalBlocks, CausalForEveryDilationConfig) {
    for (const auto& dil : std::vector<std::vector<std::size_t>>{{1}, {1, 2}, {1, 2, 4, 8}, {2, 8}}) {
        DenoiserConfig c = mini();
        c.dilations = dil;
        c.length = 9;
        const MatchsDenoiser net(c, 3);
        Rng rng(4);
        const Tensor x = random_tensor({2, 4, 9}, rng);
        const Tensor a = net.encode(x, 5);
        for (std::size_t t_pert : {8u, 5u}) {
            std::vector<double> v = x.values();
            for (std::size_t row = 0; row < 8; ++row) v[row * 9 + t_pert] += 1.5;
            const Tensor b = net.encode(Tensor(x.shape(), v), 5);
            for (std::size_t row = 0; row < 2 * c.d_model; ++row)
                for (std::size_t t = 0; t < t_pert; ++t) EXPECT_EQ(a.values()[row * 9 + t], b.values()[row * 9 + t]);
        }
    }
}

TEST(TemporalBlocks, ZeroInputGivesStockIndependentResponse) {
    const MatchsDenoiser net(mini(), 5);
    const Tensor out = net.encode(Tensor::zeros({3, 4, 5}), 1);
    EXPECT_EQ(out.shape(), (Shape{3, 8, 5}));
    const std::size_t per = 8 * 5;
    for (std::size_t i = 0; i < per; ++i) {
        EXPECT_EQ(out.values()[i], out.values()[per + i]);
        EXPECT_EQ(out.values()[i], out.values()[2 * per + i]);
    }
}

TEST(Mrt, SingleTokenAndMaskCountErrors) {
    const MatchsDenoiser net(mini(), 6);
    Rng rng(7);
    const Tensor one = random_tensor({1, 40}, rng);
    EXPECT_EQ(net.mrt_forward(one, {BinaryMatrix::identity(1), BinaryMatrix::identity(1)}).shape(), (Shape{1, 40}));
    EXPECT_THROW(net.mrt_forward(one, {BinaryMatrix::identity(1)}), ContractError);
    HeadMaskSet three;
    three.masks.assign(3, BinaryMatrix::identity(4));
    EXPECT_THROW(net.resolve_masks(three, 4), ContractError);
}

TEST(Mrt, SurplusHeadsReuseCoverage) {
    const MatchsDenoiser net(mini(4, 1), 8);
    HeadMaskSet set;
    BinaryMatrix a = BinaryMatrix::identity(3), b = BinaryMatrix::identity(3);
    a.set(0, 1, 1);
    a.set(1, 0, 1);
    b.set(1, 2, 1);
    b.set(2, 1, 1);
    set.masks = {a, b};
    const auto r = net.resolve_masks(set, 3);
    ASSERT_EQ(r.size(), 4u);
    EXPECT_TRUE(r[2] == set.coverage());
    EXPECT_TRUE(r[3] == set.coverage());
}

TEST(Mrt, AllOnesMasksEqualUnmaskedEncoder) {
    // 2 masked heads with all-ones masks vs the same weights with every head unmasked
    const DenoiserConfig masked_cfg = mini(2, 1);
    const MatchsDenoiser a(masked_cfg, 9);
    DenoiserConfig c = mini(0, 3);
    MatchsDenoiser b(c, 9);
    ASSERT_EQ(a.named_parameters().size(), b.named_parameters().size());
    for (std::size_t i = 0; i < a.named_parameters().size(); ++i) {
        auto dst = b.named_parameters()[i].value.mutable_data();
        const auto& src = a.named_parameters()[i].value.values();
        ASSERT_EQ(dst.size(), src.size());
        std::copy(src.begin(), src.end(), dst.begin());
    }
    Rng rng(10);
    const Tensor tokens = random_tensor({4, 40}, rng);
    BinaryMatrix ones(4);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 4; ++j) ones.set(i, j, 1);
    EXPECT_EQ(a.mrt_forward(tokens, {ones, ones}).values(), b.mrt_forward(tokens, {}).values());
}

TEST(Denoiser, ShapeAndNoDeadParameterGroup) {
    const MatchsDenoiser net(mini(), 11);
    Rng rng(12);
    const Tensor x = random_tensor({3, 2, 5}, rng), target = random_tensor({3, 2, 5}, rng);
    auto masks = std::make_shared<HeadMaskSet>();
    BinaryMatrix m = BinaryMatrix::identity(3);
    m.set(0, 1, 1);
    m.set(1, 0, 1);
    masks->masks = {m};
    const ConditioningBundle bundle = bundle_for(target, 1, masks);
    const Tensor out = net.predict(x, bundle, 4);
    EXPECT_EQ(out.shape(), x.shape());
    backward(mean(out));
    for (const auto& p : net.named_parameters()) {
        ASSERT_TRUE(p.value.has_grad()) << p.name;
        double norm = 0.0;
        for (double g : p.value.grad()) norm += g * g;
        EXPECT_GT(norm, 0.0) << p.name;
    }
}

TEST(Denoiser, UnrelatedStockCannotInfluenceWithoutUnmaskedHeads) {
    const MatchsDenoiser net(mini(2, 0), 13);
    Rng rng(14);
    const Tensor x = random_tensor({3, 2, 5}, rng), target = random_tensor({3, 2, 5}, rng);
    // stocks 0 and 1 are related, stock 2 is isolated
    auto masks = std::make_shared<HeadMaskSet>();
    BinaryMatrix m = BinaryMatrix::identity(3);
    m.set(0, 1, 1);
    m.set(1, 0, 1);
    masks->masks = {m, m};
    const Tensor a = net.predict(x, bundle_for(target, 1, masks), 3);
    std::vector<double> v = x.values(), tv = target.values();
    for (std::size_t i = 20; i < 30; ++i) v[i] += 2.0, tv[i] -= 1.0;
    const Tensor b = net.predict(Tensor(x.shape(), v), bundle_for(Tensor(target.shape(), tv), 1, masks), 3);
    for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(a.values()[i], b.values()[i]);
    bool changed = false;
    for (std::size_t i = 20; i < 30; ++i) changed |= a.values()[i] != b.values()[i];
    EXPECT_TRUE(changed);
    // the related stock does see the change
    std::vector<double> w = x.values();
    w[10] += 2.0;
    const Tensor c = net.predict(Tensor(x.shape(), w), bundle_for(target, 1, masks), 3);
    changed = false;
    for (std::size_t i = 0; i < 10; ++i) changed |= a.values()[i] != c.values()[i];
    EXPECT_TRUE(changed);
}

TEST(Denoiser, StockPermutationEquivariance) {
    const MatchsDenoiser net(mini(), 15);
    Rng rng(16);
    const Tensor x = random_tensor({4, 2, 5}, rng), target = random_tensor({4, 2, 5}, rng);
    BinaryMatrix m1 = BinaryMatrix::identity(4), m2 = BinaryMatrix::identity(4);
    m1.set(0, 1, 1), m1.set(1, 0, 1), m2.set(2, 3, 1), m2.set(3, 2, 1), m2.set(0, 3, 1), m2.set(3, 0, 1);
    auto masks = std::make_shared<HeadMaskSet>();
    masks->masks = {m1, m2};
    const std::vector<std::size_t> perm = {2, 0, 3, 1};
    auto pmasks = std::make_shared<HeadMaskSet>();
    pmasks->masks = {permute_mask(m1, perm), permute_mask(m2, perm)};
    const Tensor a = net.predict(x, bundle_for(target, 1, masks), 6);
    const Tensor b = net.predict(permute_stocks(x, perm), bundle_for(permute_stocks(target, perm), 1, pmasks), 6);
    const Tensor pa = permute_stocks(a, perm);
    for (std::size_t i = 0; i < pa.numel(); ++i) EXPECT_NEAR(pa.values()[i], b.values()[i], 1e-12);
}

TEST(Denoiser, GradientsMatchFiniteDifferences) {
    // N=3, P=2, L=4 (+1 future), d=8, 2 masked + 1 unmasked heads
    const MatchsDenoiser net(mini(), 17);
    Rng rng(18);
    const Tensor x = random_tensor({3, 2, 5}, rng), target = random_tensor({3, 2, 5}, rng);
    const Tensor probe = random_tensor({3, 2, 5}, rng);
    const ConditioningBundle bundle = bundle_for(target, 1, nullptr);
    const auto report = matchs::testing::fd_check(
        [&] { return sum(mul(net.predict(x, bundle, 2), probe)); }, net.parameters(), 1e-6, 1e-4);
    EXPECT_LT(report.max_rel_err, 1e-4);
    EXPECT_EQ(report.checked, net.parameter_count());
}

TEST(Denoiser, ParameterCountIsAFunctionOfConfig) {
    const MatchsDenoiser a(mini(), 1), b(mini(), 2);
    EXPECT_EQ(a.parameter_count(), b.parameter_count());
    std::size_t total = 0;
    for (const auto& [group, n] : a.describe()) total += n;
    EXPECT_EQ(total, a.parameter_count());
    const std::set<std::string> groups = [&] {
        std::set<std::string> g;
        for (const auto& [name, n] : a.describe()) g.insert(name.substr(0, name.find('.')));
        return g;
    }();
    EXPECT_EQ(groups, (std::set<std::string>{"dicem", "mrt", "dcnn", "head"}));
    DenoiserConfig bad = mini();
    bad.dilations = {1, 3};
    EXPECT_THROW(MatchsDenoiser(bad, 1), ConfigError);
    bad.dilations = {2, 1};
    EXPECT_THROW(MatchsDenoiser(bad, 1), ConfigError);
}
