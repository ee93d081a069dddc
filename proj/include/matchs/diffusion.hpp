#pragma once

// Conditional DDPM over [N x P x T] windows: closed-form forward corruption,
// the epsilon-prediction objective, and ancestral sampling of the reverse
// chain. Every schedule quantity is per timepoint and broadcast over stocks
// and indicators.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <memory>
#include <span>
#include <sstream>
#include <utility>
#include <vector>

#include "matchs/adaptive_noise.hpp"
#include "matchs/errors.hpp"
#include "matchs/market_data.hpp"
#include "matchs/relations.hpp"
#include "matchs/rng.hpp"
#include "matchs/tensor.hpp"

namespace matchs {

struct ConditioningBundle {
    Tensor history;  // [N x P x T]: clean target with the future positions zeroed
    std::vector<std::uint8_t> future_mask;
    std::shared_ptr<const HeadMaskSet> head_masks;

    // Throws if any future position of `history` carries a value.
    void check_masked() const {
        const std::size_t len = history.dim(2);
        if (future_mask.size() != len) throw DimensionError("conditioning: future mask length does not match history");
        const auto& v = history.values();
        for (std::size_t row = 0; row < v.size() / len; ++row)
            for (std::size_t t = 0; t < len; ++t)
                if (future_mask[t] && v[row * len + t] != 0.0) {
                    throw ContractError("conditioning: future position " + std::to_string(t) + " is not masked");
                }
    }
};

inline ConditioningBundle make_bundle(const TrainingInstance& inst, std::shared_ptr<const HeadMaskSet> masks) {
    const std::size_t len = inst.target.dim(2);
    std::vector<double> h(inst.target.values());
    for (std::size_t row = 0; row < h.size() / len; ++row)
        for (std::size_t t = 0; t < len; ++t)
            if (inst.future_mask[t]) h[row * len + t] = 0.0;
    return {Tensor(inst.target.shape(), std::move(h)), inst.future_mask, std::move(masks)};
}

// Anything that maps (x_k, conditioning, k) to a noise estimate shaped like x_k.
template <class Net>
concept EpsilonModel = requires(Net& net, const Tensor& x, const ConditioningBundle& bundle, std::size_t k) {
    { net.predict(x, bundle, k) } -> std::convertible_to<Tensor>;
};

// x_k = sqrt(abar_k(t)) x0 + sqrt(1 - abar_k(t)) eps, eps ~ N(0, I).
inline std::pair<Tensor, Tensor> forward_diffuse(const Tensor& x0, std::size_t k, const NoiseSchedule& schedule, Rng& rng) {
    if (k < 1 || k > schedule.steps) {
        throw ContractError("forward_diffuse: step " + std::to_string(k) + " outside [1, " + std::to_string(schedule.steps) + "]");
    }
    const std::size_t len = x0.shape().back();
    if (len != schedule.length) throw DimensionError("forward_diffuse: schedule length does not match target");
    Tensor eps = gaussian(x0.shape(), rng);
    std::vector<double> xk(x0.numel());
    for (std::size_t i = 0; i < xk.size(); ++i) {
        const double ab = schedule.alpha_bar(k, i % len);
        xk[i] = std::sqrt(ab) * x0.values()[i] + std::sqrt(1.0 - ab) * eps.values()[i];
    }
    return {Tensor(x0.shape(), std::move(xk)), std::move(eps)};
}

// One transition of q: x_k = sqrt(1 - beta_k(t)) x_{k-1} + sqrt(beta_k(t)) z.
inline Tensor forward_step(const Tensor& x_prev, std::size_t k, const NoiseSchedule& schedule, Rng& rng) {
    if (k < 1 || k > schedule.steps) throw ContractError("forward_step: step out of range");
    const std::size_t len = x_prev.shape().back();
    std::vector<double> out(x_prev.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double b = schedule.beta(k, i % len);
        out[i] = std::sqrt(1.0 - b) * x_prev.values()[i] + std::sqrt(b) * rng.gaussian();
    }
    return Tensor(x_prev.shape(), std::move(out));
}

struct DiffusionExample {
    Tensor target;  // clean [N x P x T]
    ConditioningBundle bundle;
    NoiseSchedule schedule;
    std::vector<double> loss_weights;  // per timepoint; empty means uniform
};

// Weighted mean squared error; weights are per timepoint and renormalised so
// that uniform weights give the plain mean.
inline Tensor epsilon_loss(const Tensor& predicted, const Tensor& eps, std::span<const double> weights) {
    Tensor diff2 = square(sub(predicted, eps));
    if (weights.empty()) return mean(diff2);
    const std::size_t len = eps.shape().back();
    if (weights.size() != len) throw DimensionError("epsilon_loss: weight length does not match time axis");
    double wsum = 0.0;
    for (double w : weights) wsum += w;
    std::vector<double> wv(eps.numel());
    const double norm = static_cast<double>(len) / wsum;
    for (std::size_t i = 0; i < wv.size(); ++i) wv[i] = weights[i % len] * norm;
    return mean(mul(diff2, Tensor(eps.shape(), std::move(wv))));
}

// Samples k ~ U{1..K} and eps for each example, runs the denoiser on the
// noisy target and accumulates gradients of the batch-mean epsilon loss.
// Returns the loss value.
template <EpsilonModel Net>
double training_step(Net& net, std::span<const DiffusionExample> batch, Rng& rng) {
    if (batch.empty()) throw ContractError("training_step: empty batch");
    Tensor total;
    std::vector<std::size_t> ks;
    for (const auto& ex : batch) {
        ex.bundle.check_masked();
        const std::size_t k = 1 + static_cast<std::size_t>(rng.uniform_int(ex.schedule.steps));
        ks.push_back(k);
        auto [xk, eps] = forward_diffuse(ex.target, k, ex.schedule, rng);
        Tensor pred;
        try {
            pred = net.predict(xk, ex.bundle, k);
        } catch (const NumericError& e) {
            throw NumericError(std::string("training aborted at diffusion step k=") + std::to_string(k) + ": " + e.what());
        }
        Tensor loss = epsilon_loss(pred, eps, ex.loss_weights);
        total = total.defined() ? add(total, loss) : loss;
    }
    total = scale(total, 1.0 / static_cast<double>(batch.size()));
    const double value = total.item();
    if (!std::isfinite(value)) {
        std::ostringstream os;
        os << "training aborted: non-finite loss; k =";
        for (auto k : ks) os << ' ' << k;
        throw NumericError(os.str());
    }
    backward(total);
    return value;
}

// Ancestral sampling from k = K down to 1. Chain s draws from base.fork(s).
// Returns [S x N x P x T]; history positions hold reconstructions and future
// positions hold forecasts.
template <EpsilonModel Net>
Tensor sample(Net& net, const ConditioningBundle& bundle, const NoiseSchedule& schedule, const Rng& base,
              std::size_t n_samples) {
    if (n_samples < 1) throw ContractError("sample: n_samples must be >= 1");
    bundle.check_masked();
    const Shape shape = bundle.history.shape();
    const std::size_t len = shape.back(), per = bundle.history.numel();
    if (len != schedule.length) throw DimensionError("sample: schedule length does not match conditioning");
    NoGradGuard no_grad;

    std::vector<double> out;
    out.reserve(n_samples * per);
    for (std::size_t s = 0; s < n_samples; ++s) {
        Rng rng = base.fork(s);
        Tensor x = gaussian(shape, rng);
        for (std::size_t k = schedule.steps; k >= 1; --k) {
            const Tensor eps_hat = net.predict(x, bundle, k);
            std::vector<double> next(per);
            for (std::size_t i = 0; i < per; ++i) {
                const std::size_t t = i % len;
                const double beta = schedule.beta(k, t);
                const double ab = schedule.alpha_bar(k, t);
                const double coef = beta / std::sqrt(1.0 - ab);
                const double mu = (x.values()[i] - coef * eps_hat.values()[i]) / std::sqrt(1.0 - beta);
                if (k > 1) {
                    const double ab_prev = schedule.alpha_bar(k - 1, t);
                    const double var = (1.0 - ab_prev) / (1.0 - ab) * beta;
                    next[i] = mu + std::sqrt(var) * rng.gaussian();
                } else {
                    next[i] = mu;
                }
            }
            x = Tensor(shape, std::move(next));
        }
        out.insert(out.end(), x.values().begin(), x.values().end());
    }
    Shape out_shape{n_samples};
    out_shape.insert(out_shape.end(), shape.begin(), shape.end());
    return Tensor(std::move(out_shape), std::move(out));
}

// Element-wise median over the leading sample axis.
inline Tensor point_forecast(const Tensor& samples) {
    if (samples.rank() < 2 || samples.dim(0) < 1) throw ContractError("point_forecast: need at least one sample");
    const std::size_t s = samples.dim(0), per = samples.numel() / s;
    Shape shape(samples.shape().begin() + 1, samples.shape().end());
    std::vector<double> out(per), column(s);
    for (std::size_t i = 0; i < per; ++i) {
        for (std::size_t j = 0; j < s; ++j) column[j] = samples.values()[j * per + i];
        std::sort(column.begin(), column.end());
        out[i] = s % 2 ? column[s / 2] : 0.5 * (column[s / 2 - 1] + column[s / 2]);
    }
    return Tensor(std::move(shape), std::move(out));
}

enum class Movement : int { Down = 0, Up = 1, Flat = 2 };

// Up when the relative change is >= 0 (ties go up). With a positive dead
// zone, moves with |change| <= dead_zone are Flat and excluded from scoring.
inline Movement movement_from_change(double change, double dead_zone = 0.0) {
    if (dead_zone > 0.0 && std::abs(change) <= dead_zone) return Movement::Flat;
    return change >= 0.0 ? Movement::Up : Movement::Down;
}

inline Movement label_movement(double last, double next, double dead_zone = 0.0) {
    return movement_from_change(last != 0.0 ? (next - last) / std::abs(last) : next - last, dead_zone);
}

inline std::vector<Movement> movement_labels(std::span<const double> forecast, std::span<const double> last,
                                             double dead_zone = 0.0) {
    if (forecast.size() != last.size()) throw DimensionError("movement_labels: length mismatch");
    std::vector<Movement> out;
    for (std::size_t i = 0; i < forecast.size(); ++i) out.push_back(label_movement(last[i], forecast[i], dead_zone));
    return out;
}

}  // namespace matchs
