#pragma once

// Glue between the modules: dataset preparation, the training loop,
// forecasting over a split and scoring. Used by the CLI and the experiment
// tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "matchs/adaptive_noise.hpp"
#include "matchs/denoiser.hpp"
#include "matchs/diffusion.hpp"
#include "matchs/evaluation.hpp"
#include "matchs/market_data.hpp"
#include "matchs/optim.hpp"
#include "matchs/relations.hpp"
#include "matchs/rng.hpp"

namespace matchs {

enum class MaskMode { Relations, Aggregated, None };

inline MaskMode parse_mask_mode(const std::string& s) {
    if (s == "relations") return MaskMode::Relations;
    if (s == "aggregated") return MaskMode::Aggregated;
    if (s == "none") return MaskMode::None;
    throw ConfigError("mask_mode", "expected relations, aggregated or none");
}

// Head masks for one of the three relation treatments. `None` gives every
// masked head the identity mask (no cross-stock attention through them).
inline HeadMaskSet masks_for(const RelationTensor& rel, MaskMode mode, std::size_t max_heads, std::size_t unmasked) {
    switch (mode) {
        case MaskMode::Relations:
            return group_relations(rel, max_heads, unmasked);
        case MaskMode::Aggregated:
            return aggregated_masks(rel, unmasked);
        case MaskMode::None:
            break;
    }
    HeadMaskSet h;
    h.masks.push_back(BinaryMatrix::identity(rel.n()));
    h.unmasked_heads = unmasked;
    h.group_assignment.assign(rel.g(), 0);
    return h;
}

struct NoiseOptions {
    std::size_t steps = 100;  // K
    double beta_max = 0.2;
    double gamma = 0.5;
    double alpha = 0.5;
    std::size_t window = 2;
    bool loss_weighting = false;  // weight the loss by 1 + gamma I(t) instead of modulating betas
    std::size_t close_channel = 0;
};

inline DiffusionExample make_example(const TrainingInstance& inst, const std::vector<int>& labels,
                                     const std::shared_ptr<const HeadMaskSet>& masks, const NoiseOptions& opt) {
    DiffusionExample ex;
    ex.target = inst.target;
    ex.bundle = make_bundle(inst, masks);
    if (opt.gamma == 0.0) {
        ex.schedule = build_schedule(uniform_significance(inst.target.dim(0), inst.target.dim(2), 0.5), opt.steps,
                                     opt.beta_max, 0.0);
        return ex;
    }
    const SignificanceScore score = window_significance(inst, labels, opt.close_channel, opt.alpha, opt.window);
    if (opt.loss_weighting) {
        ex.schedule = build_schedule(score, opt.steps, opt.beta_max, 0.0);
        for (double i : score.per_timepoint()) ex.loss_weights.push_back(1.0 + opt.gamma * i);
    } else {
        ex.schedule = build_schedule(score, opt.steps, opt.beta_max, opt.gamma);
    }
    return ex;
}

inline std::vector<DiffusionExample> make_examples(const std::vector<TrainingInstance>& instances,
                                                   const std::vector<int>& labels,
                                                   const std::shared_ptr<const HeadMaskSet>& masks,
                                                   const NoiseOptions& opt) {
    std::vector<DiffusionExample> out;
    out.reserve(instances.size());
    for (const auto& inst : instances) out.push_back(make_example(inst, labels, masks, opt));
    return out;
}

// Batch-mean epsilon loss without touching gradients.
template <EpsilonModel Net>
double evaluate_loss(Net& net, std::span<const DiffusionExample> examples, Rng rng) {
    NoGradGuard guard;
    double total = 0.0;
    for (const auto& ex : examples) {
        const std::size_t k = 1 + static_cast<std::size_t>(rng.uniform_int(ex.schedule.steps));
        auto [xk, eps] = forward_diffuse(ex.target, k, ex.schedule, rng);
        total += epsilon_loss(net.predict(xk, ex.bundle, k), eps, ex.loss_weights).item();
    }
    return total / static_cast<double>(examples.size());
}

struct TrainOptions {
    std::size_t batch_size = 16;
    double lr = 1e-4;
    double lr_decay = 1.0;
    std::size_t epochs = 1;
    std::size_t max_steps = 0;  // 0: no cap
    std::uint64_t seed = 7;
};

struct EpochSummary {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = std::nan("");
    double lr = 0.0;
    std::vector<std::size_t> k_histogram;
};

struct TrainLog {
    std::vector<double> step_losses;
    std::vector<EpochSummary> epochs;
};

struct TrainCallbacks {
    std::function<void(std::size_t step, double loss, double lr)> on_step;
    std::function<void(const EpochSummary&)> on_epoch;
};

// Adam on shuffled mini-batches, learning rate decayed once per epoch.
inline TrainLog train_denoiser(MatchsDenoiser& net, const std::vector<DiffusionExample>& train,
                               const std::vector<DiffusionExample>& val, const TrainOptions& opt,
                               const TrainCallbacks& cb = {}) {
    if (train.empty()) throw DataError("empty dataset: no training windows");
    if (opt.batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
    DecayingLearningRate lr(opt.lr, opt.lr_decay);
    AdamState adam;
    std::vector<Tensor> params = net.parameters();
    Rng shuffle = Rng::stream(opt.seed, "shuffle");
    Rng noise = Rng::stream(opt.seed, "diffusion");
    TrainLog log;
    std::vector<std::size_t> order(train.size());
    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= opt.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.uniform_int(i)]);
        EpochSummary summary;
        summary.epoch = epoch;
        summary.lr = lr.current();
        summary.k_histogram.assign(train.front().schedule.steps, 0);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t b = 0; b < order.size(); b += opt.batch_size) {
            if (opt.max_steps && step >= opt.max_steps) break;
            std::vector<DiffusionExample> batch;
            for (std::size_t j = b; j < std::min(order.size(), b + opt.batch_size); ++j) batch.push_back(train[order[j]]);
            Rng peek = noise;
            for (const auto& ex : batch) {
                const std::size_t k = 1 + static_cast<std::size_t>(peek.uniform_int(ex.schedule.steps));
                if (k - 1 < summary.k_histogram.size()) ++summary.k_histogram[k - 1];
                (void)forward_diffuse(ex.target, k, ex.schedule, peek);
            }
            zero_grads(params);
            const double loss = training_step(net, std::span<const DiffusionExample>(batch), noise);
            adam_step(params, lr.current(), adam);
            ++step;
            log.step_losses.push_back(loss);
            loss_sum += loss;
            ++batches;
            if (cb.on_step) cb.on_step(step, loss, lr.current());
        }
        if (batches == 0) break;
        summary.train_loss = loss_sum / static_cast<double>(batches);
        if (!val.empty()) summary.val_loss = evaluate_loss(net, std::span<const DiffusionExample>(val), Rng::stream(opt.seed, "validation"));
        log.epochs.push_back(summary);
        if (cb.on_epoch) cb.on_epoch(summary);
        lr.on_epoch_end();
        if (opt.max_steps && step >= opt.max_steps) break;
    }
    return log;
}

// Sampled forecasts of one window at the first future position, normalised
// units. `movement` holds the channel that movement is read from when that
// is not close (typically the return indicator).
struct CloseForecast {
    std::size_t start = 0;                      // first history day of the window
    std::vector<std::vector<double>> samples;   // [N][S] close
    std::vector<std::vector<double>> movement;  // [N][S], empty when movement is read off close
};

template <EpsilonModel Net>
CloseForecast forecast_window(Net& net, const DiffusionExample& ex, std::size_t start, const Rng& rng,
                              std::size_t n_samples, std::size_t close_channel, std::size_t movement_channel) {
    const Tensor draws = sample(net, ex.bundle, ex.schedule, rng, n_samples);
    const std::size_t n = draws.dim(1), p = draws.dim(2), len = draws.dim(3);
    const std::size_t horizon = static_cast<std::size_t>(
        std::count(ex.bundle.future_mask.begin(), ex.bundle.future_mask.end(), std::uint8_t{1}));
    const std::size_t pos = len - horizon;
    auto channel = [&](std::size_t c) {
        std::vector<std::vector<double>> out(n, std::vector<double>(n_samples));
        for (std::size_t s = 0; s < n_samples; ++s)
            for (std::size_t i = 0; i < n; ++i) out[i][s] = draws.values()[((s * n + i) * p + c) * len + pos];
        return out;
    };
    CloseForecast f;
    f.start = start;
    f.samples = channel(close_channel);
    if (movement_channel != close_channel) f.movement = channel(movement_channel);
    return f;
}

template <EpsilonModel Net>
CloseForecast forecast_window(Net& net, const DiffusionExample& ex, std::size_t start, const Rng& rng,
                              std::size_t n_samples, std::size_t close_channel) {
    return forecast_window(net, ex, start, rng, n_samples, close_channel, close_channel);
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw ContractError("median: empty input");
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

struct SplitEvaluation {
    MovementMetrics movement;
    double crps = 0.0;
    std::vector<std::vector<double>> predicted_returns;  // [windows][N]
    std::vector<std::vector<double>> realized_returns;   // [windows][N]
    std::vector<std::string> day_labels;
};

// Movement, CRPS and next-day returns from close forecasts. `raw` is the
// unnormalised panel with the same indicator layout as training. When the
// forecasts carry a movement channel, predicted direction and ranking come
// from the denormalised median of that channel (a return), otherwise from the
// forecast close against the last observed close. Truth is always close to
// close.
inline SplitEvaluation score_forecasts(const std::vector<CloseForecast>& forecasts, std::size_t history_len,
                                       const FeaturePanel& raw, const NormStats& stats, std::size_t close_channel,
                                       std::size_t movement_channel, double dead_zone = 0.0) {
    if (forecasts.empty()) throw ContractError("score_forecasts: no forecasts");
    SplitEvaluation out;
    std::vector<Movement> pred, truth;
    double crps_sum = 0.0;
    std::size_t crps_count = 0;
    const std::size_t n = raw.n_stocks();
    for (const auto& f : forecasts) {
        if (f.samples.size() != n) throw DimensionError("score_forecasts: forecast covers the wrong number of stocks");
        const bool by_return = movement_channel != close_channel;
        if (by_return && f.movement.size() != n)
            throw DimensionError("score_forecasts: forecast lacks the movement channel");
        const std::size_t t_last = f.start + history_len - 1, t_next = f.start + history_len;
        if (t_next >= raw.length()) throw DimensionError("score_forecasts: forecast beyond the end of the panel");
        std::vector<double> pr(n), rr(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double last = raw.at(i, close_channel, t_last);
            const double actual = raw.at(i, close_channel, t_next);
            if (by_return) {
                pr[i] = stats.denormalize(median(f.movement[i]), i, movement_channel);
                pred.push_back(movement_from_change(pr[i], dead_zone));
            } else {
                const double forecast = stats.denormalize(median(f.samples[i]), i, close_channel);
                pred.push_back(label_movement(last, forecast, dead_zone));
                pr[i] = forecast / last - 1.0;
            }
            truth.push_back(label_movement(last, actual, dead_zone));
            rr[i] = actual / last - 1.0;
            crps_sum += crps(f.samples[i], stats.normalize(actual, i, close_channel));
            ++crps_count;
        }
        out.predicted_returns.push_back(std::move(pr));
        out.realized_returns.push_back(std::move(rr));
        out.day_labels.push_back(raw.timestamps[t_last]);
    }
    out.movement = movement_metrics(pred, truth);
    out.crps = crps_sum / static_cast<double>(crps_count);
    return out;
}

}  // namespace matchs
