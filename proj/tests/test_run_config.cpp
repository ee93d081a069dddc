#include <gtest/gtest.h>

#include <sstream>

#include "matchs/run_config.hpp"

using namespace matchs;

namespace {

std::string field_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const ConfigError& e) {
        return e.field();
    }
    return "<no error>";
}

}  // namespace

TEST(RunConfig, DefaultsValidate) {
    const RunConfig c;
    EXPECT_NO_THROW(c.validate());
    EXPECT_EQ(c.batch_size, 16u);
    EXPECT_EQ(c.K, 100u);
    EXPECT_DOUBLE_EQ(c.beta_base_max, 0.2);
    EXPECT_DOUBLE_EQ(c.lr, 1e-4);
    EXPECT_EQ(c.epochs, 100u);
    EXPECT_EQ(c.horizon, 3u);
    EXPECT_EQ(c.n_masked_heads, 12u);
    EXPECT_EQ(c.n_unmasked_heads, 4u);
}

TEST(RunConfig, ParsesSectionsCommentsAndValues) {
    std::istringstream in(
        "# experiment\n[data]\nn_stocks = 5\nindicators = close, return\n\n[diffusion]\nK=20   # fewer steps\n"
        "gamma = 0.25\n[model]\ndilations = 1,2,4\n");
    const RunConfig c = parse_config(in);
    EXPECT_EQ(c.n_stocks, 5u);
    EXPECT_EQ(c.indicator_list(), (std::vector<std::string>{"close", "return"}));
    EXPECT_EQ(c.K, 20u);
    EXPECT_DOUBLE_EQ(c.gamma, 0.25);
    EXPECT_EQ(c.dilation_list(), (std::vector<std::size_t>{1, 2, 4}));
    EXPECT_EQ(c.denoiser().dilations, (std::vector<std::size_t>{1, 2, 4}));
    EXPECT_EQ(c.denoiser().length, c.L + c.horizon);
    EXPECT_EQ(c.denoiser().n_indicators, 2u);
}

TEST(RunConfig, ParseErrors) {
    std::istringstream unknown("[train]\nlearning_rate = 0.1\n");
    EXPECT_EQ(field_of([&] { parse_config(unknown); }), "learning_rate");
    std::istringstream dup("lr = 0.1\nlr = 0.2\n");
    EXPECT_EQ(field_of([&] { parse_config(dup); }), "lr");
    std::istringstream bad_int("epochs = 3.5\n");
    EXPECT_EQ(field_of([&] { parse_config(bad_int); }), "epochs");
    std::istringstream bad_num("lr = fast\n");
    EXPECT_EQ(field_of([&] { parse_config(bad_num); }), "lr");
    std::istringstream no_eq("just words\n");
    EXPECT_THROW(parse_config(no_eq), ConfigError);
    EXPECT_THROW(load_config("/nonexistent/matchs.cfg"), DataError);
}

TEST(RunConfig, OverridesReplaceFileValues) {
    std::istringstream in("lr = 0.01\nseed = 3\n");
    RunConfig c = parse_config(in);
    c.set("lr", "0.5");
    EXPECT_DOUBLE_EQ(c.lr, 0.5);
    EXPECT_EQ(c.get("seed"), "3");
    EXPECT_TRUE(RunConfig::has_key("beta_base_max"));
    EXPECT_FALSE(RunConfig::has_key("beta"));
}

TEST(RunConfig, ValidationNamesTheField) {
    auto bad = [](const std::string& key, const std::string& value) {
        RunConfig c;
        c.set(key, value);
        return field_of([&] { c.validate(); });
    };
    EXPECT_EQ(bad("beta_base_max", "1.5"), "beta_base_max");
    EXPECT_EQ(bad("gamma", "2"), "gamma");
    EXPECT_EQ(bad("alpha", "-0.1"), "alpha");
    EXPECT_EQ(bad("k", "0"), "k");
    EXPECT_EQ(bad("mask_mode", "partial"), "mask_mode");
    EXPECT_EQ(bad("noise_mode", "both"), "noise_mode");
    EXPECT_EQ(bad("close_indicator", "open"), "close_indicator");
    EXPECT_EQ(bad("movement_indicator", "volume"), "movement_indicator");
    EXPECT_EQ(bad("dilations", "1,3"), "dilations");
    EXPECT_EQ(bad("n_masked_heads", "13"), "n_masked_heads");
    EXPECT_EQ(bad("lr", "0"), "lr");
}

TEST(RunConfig, TextRoundTripAndHash) {
    RunConfig a;
    a.set("n_stocks", "6");
    a.set("gamma", "0.3");
    std::istringstream in(a.to_text());
    const RunConfig b = parse_config(in);
    EXPECT_EQ(a.to_text(), b.to_text());
    EXPECT_EQ(a.hash(), b.hash());
    EXPECT_EQ(a.hash().size(), 16u);
    RunConfig c = a;
    c.set("seed", "8");
    EXPECT_NE(a.hash(), c.hash());
    EXPECT_EQ(a.to_json()["n_stocks"], "6");
}

TEST(RunConfig, DerivedOptions) {
    RunConfig c;
    c.set("noise_mode", "loss_weight");
    c.set("gamma", "0.4");
    EXPECT_TRUE(c.noise().loss_weighting);
    EXPECT_DOUBLE_EQ(c.noise().gamma, 0.4);
    c.set("indicators", "return,close");
    EXPECT_EQ(c.close_channel(), 1u);
    EXPECT_EQ(c.movement_channel(), 0u);
    c.set("movement_indicator", "close");
    EXPECT_EQ(c.movement_channel(), c.close_channel());
    EXPECT_EQ(c.mask(), MaskMode::Relations);
    c.set("mask_mode", "none");
    EXPECT_EQ(c.mask(), MaskMode::None);
    EXPECT_EQ(c.training().batch_size, 16u);
}
