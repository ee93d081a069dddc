#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "matchs/errors.hpp"
#include "matchs/tensor.hpp"

namespace matchs {

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

// One bias-corrected Adam update. Parameters without a gradient buffer are
// treated as having zero gradient.
inline void adam_step(std::span<Tensor> params, double lr, AdamState& state) {
    if (!(lr > 0.0)) throw ContractError("adam_step: learning rate must be positive");
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].numel(), 0.0);
            state.v[i].assign(params[i].numel(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw ContractError("adam_step: parameter list changed between steps");
    ++state.step;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = params[i];
        if (!p.has_grad()) continue;
        auto g = p.grad();
        auto w = p.mutable_data();
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (g.size() != w.size() || m.size() != w.size()) {
            throw DimensionError("adam_step: gradient/state size mismatch for parameter " + std::to_string(i));
        }
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            const double mhat = m[j] / c1;
            const double vhat = v[j] / c2;
            w[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
    }
}

inline void zero_grads(std::span<Tensor> params) {
    for (Tensor& p : params) p.zero_grad();
}

// Multiplicative per-epoch learning-rate decay.
class DecayingLearningRate {
   public:
    DecayingLearningRate(double initial, double decay_per_epoch) : lr_(initial), decay_(decay_per_epoch) {
        if (!(initial > 0.0)) throw ConfigError("lr", "must be > 0");
        if (!(decay_per_epoch > 0.0 && decay_per_epoch <= 1.0)) throw ConfigError("lr_decay", "must be in (0, 1]");
    }

    double current() const { return lr_; }
    void on_epoch_end() { lr_ *= decay_; }

   private:
    double lr_;
    double decay_;
};

}  // namespace matchs
