#pragma once

// Significance-driven noise schedule.
//
// A timepoint is "significant" when the stock is locally volatile there, or
// when its cluster is volatile there and the stock tracks its cluster closely
// (small DTW distance to the mean of its cluster mates). The per-timepoint
// score modulates the forward-process variances around a linear schedule.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "matchs/errors.hpp"
#include "matchs/market_data.hpp"

namespace matchs {

// v(t) = sum_{i=t-w}^{t+w} (f_t - f_i)^2 / count, with the window clipped to
// the series and `count` the number of indices actually summed.
inline std::vector<double> local_variance(std::span<const double> series, std::size_t w) {
    if (series.empty()) throw ContractError("local_variance: empty series");
    if (w < 1) throw ContractError("local_variance: window half-width must be >= 1");
    const std::size_t n = series.size();
    std::vector<double> v(n);
    for (std::size_t t = 0; t < n; ++t) {
        const std::size_t lo = t >= w ? t - w : 0;
        const std::size_t hi = std::min(n - 1, t + w);
        double acc = 0.0;
        for (std::size_t i = lo; i <= hi; ++i) acc += (series[t] - series[i]) * (series[t] - series[i]);
        v[t] = acc / static_cast<double>(hi - lo + 1);
    }
    return v;
}

// v / max(v); an all-zero input stays all zero.
inline std::vector<double> normalize_variance(std::span<const double> v) {
    std::vector<double> out(v.begin(), v.end());
    if (out.empty()) return out;
    const double m = *std::max_element(out.begin(), out.end());
    if (!(m > 0.0)) {
        std::fill(out.begin(), out.end(), 0.0);
        return out;
    }
    for (double& x : out) x /= m;
    return out;
}

// Classic unconstrained DTW with squared-difference local cost; the path is
// anchored at (0,0) and (|a|-1,|b|-1) and moves by (1,0), (0,1) or (1,1).
inline double dtw(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) throw ContractError("dtw: empty input");
    const std::size_t m = b.size();
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> prev(m + 1, inf), cur(m + 1, inf);
    prev[0] = 0.0;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = inf;
        for (std::size_t j = 1; j <= m; ++j) {
            const double d = a[i - 1] - b[j - 1];
            cur[j] = d * d + std::min({prev[j - 1], prev[j], cur[j - 1]});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

// 1 / (1 + DTW(series_i, mean of the other members of i's cluster)).
// A stock alone in its cluster has influence 1.
inline double intra_cluster_influence(const std::vector<std::vector<double>>& series, const std::vector<int>& labels,
                                      std::size_t stock) {
    if (series.size() != labels.size()) throw DimensionError("intra_cluster_influence: labels do not match series count");
    const std::size_t len = series.at(stock).size();
    std::vector<double> mean(len, 0.0);
    std::size_t others = 0;
    for (std::size_t j = 0; j < series.size(); ++j) {
        if (j == stock || labels[j] != labels[stock]) continue;
        if (series[j].size() != len) throw DimensionError("intra_cluster_influence: ragged series");
        for (std::size_t t = 0; t < len; ++t) mean[t] += series[j][t];
        ++others;
    }
    if (others == 0) return 1.0;
    for (double& x : mean) x /= static_cast<double>(others);
    return 1.0 / (1.0 + dtw(series[stock], mean));
}

struct SignificanceScore {
    std::size_t n_stocks = 0;
    std::size_t length = 0;
    std::vector<double> values;  // [N x T], in [0, 1]
    double alpha = 0.5;
    std::size_t window = 1;

    double at(std::size_t n, std::size_t t) const { return values[n * length + t]; }

    // Mean over stocks at each timepoint.
    std::vector<double> per_timepoint() const {
        std::vector<double> out(length, 0.0);
        for (std::size_t n = 0; n < n_stocks; ++n)
            for (std::size_t t = 0; t < length; ++t) out[t] += at(n, t);
        for (double& x : out) x /= static_cast<double>(n_stocks);
        return out;
    }
};

// score_i(t) = alpha * vnorm_i(t) + (1 - alpha) * influence_i * vnorm_cluster(i)(t),
// where vnorm_cluster is the normalised local variance of the cluster-mean
// series; the grid is then divided by its maximum (all-zero stays zero).
inline SignificanceScore integrated_score(const std::vector<std::vector<double>>& series, const std::vector<int>& labels,
                                          double alpha, std::size_t w) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha", "must be in [0, 1]");
    if (series.empty()) throw ContractError("integrated_score: no series");
    if (labels.size() != series.size()) throw DimensionError("integrated_score: labels do not match series count");
    const std::size_t n = series.size(), len = series.front().size();

    SignificanceScore out{n, len, std::vector<double>(n * len), alpha, w};
    for (std::size_t i = 0; i < n; ++i) {
        if (series[i].size() != len) throw DimensionError("integrated_score: ragged series");
        const auto own = normalize_variance(local_variance(series[i], w));
        std::vector<double> cluster_mean(len, 0.0);
        std::size_t members = 0;
        for (std::size_t j = 0; j < n; ++j) {
            if (labels[j] != labels[i]) continue;
            for (std::size_t t = 0; t < len; ++t) cluster_mean[t] += series[j][t];
            ++members;
        }
        for (double& x : cluster_mean) x /= static_cast<double>(members);
        const auto cluster = normalize_variance(local_variance(cluster_mean, w));
        const double influence = intra_cluster_influence(series, labels, i);
        for (std::size_t t = 0; t < len; ++t)
            out.values[i * len + t] = alpha * own[t] + (1.0 - alpha) * influence * cluster[t];
    }
    out.values = normalize_variance(out.values);
    return out;
}

inline SignificanceScore integrated_score(const FeaturePanel& panel, const std::vector<int>& labels, std::size_t channel,
                                          double alpha, std::size_t w) {
    std::vector<std::vector<double>> series;
    for (std::size_t i = 0; i < panel.n_stocks(); ++i) series.push_back(panel.series(i, channel));
    return integrated_score(series, labels, alpha, w);
}

// Score for one training window, computed from the observed history only
// (so training and forecasting see the same information) and carried
// forward over the future positions.
inline SignificanceScore window_significance(const TrainingInstance& inst, const std::vector<int>& labels,
                                             std::size_t channel, double alpha, std::size_t w) {
    const std::size_t n = inst.history.dim(0), p = inst.history.dim(1), len = inst.history.dim(2);
    const std::size_t span = inst.target.dim(2);
    std::vector<std::vector<double>> series(n, std::vector<double>(len));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < len; ++t) series[i][t] = inst.history.values()[(i * p + channel) * len + t];
    const SignificanceScore hist = integrated_score(series, labels, alpha, w);
    SignificanceScore out{n, span, std::vector<double>(n * span), alpha, w};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < span; ++t) out.values[i * span + t] = hist.at(i, std::min(t, len - 1));
    return out;
}

// Constant score, e.g. to recover the vanilla schedule.
inline SignificanceScore uniform_significance(std::size_t n_stocks, std::size_t length, double value) {
    return {n_stocks, length, std::vector<double>(n_stocks * length, value), 0.5, 1};
}

// Per-step, per-timepoint forward-process variances. Step k runs 1..K.
struct NoiseSchedule {
    std::size_t steps = 0;
    std::size_t length = 0;
    std::vector<double> betas;        // [K x T]
    std::vector<double> alpha_bars;   // [K x T]

    double beta(std::size_t k, std::size_t t) const { return betas[(k - 1) * length + t]; }
    double alpha_bar(std::size_t k, std::size_t t) const { return alpha_bars[(k - 1) * length + t]; }
};

inline constexpr double kBetaStart = 1e-4;
inline constexpr double kBetaFloor = 1e-5;
inline constexpr double kBetaCeil = 0.999;

// beta_k(t) = clip(base_k * (1 - gamma + 2 gamma I(t)), 1e-5, 0.999) with
// base_k = lerp(1e-4, beta_max, k / K) and I(t) the stock-averaged score.
inline NoiseSchedule build_schedule(const SignificanceScore& score, std::size_t steps, double beta_max, double gamma) {
    if (steps < 1) throw ConfigError("K", "must be >= 1");
    if (!(beta_max > 0.0 && beta_max < 1.0)) throw ConfigError("beta_base_max", "must be in (0, 1)");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma", "must be in [0, 1]");
    const auto importance = score.per_timepoint();
    const std::size_t len = importance.size();
    NoiseSchedule s{steps, len, std::vector<double>(steps * len), std::vector<double>(steps * len)};
    for (std::size_t k = 1; k <= steps; ++k) {
        const double frac = static_cast<double>(k) / static_cast<double>(steps);
        const double base = kBetaStart + (beta_max - kBetaStart) * frac;
        for (std::size_t t = 0; t < len; ++t) {
            const double b = std::clamp(base * (1.0 - gamma + 2.0 * gamma * importance[t]), kBetaFloor, kBetaCeil);
            s.betas[(k - 1) * len + t] = b;
            const double prev = k == 1 ? 1.0 : s.alpha_bars[(k - 2) * len + t];
            s.alpha_bars[(k - 1) * len + t] = prev * (1.0 - b);
        }
    }
    return s;
}

inline void write_schedule_csv(const std::filesystem::path& path, const NoiseSchedule& s) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out.precision(17);
    out << "t";
    for (std::size_t k = 1; k <= s.steps; ++k) out << ",beta_" << k;
    for (std::size_t k = 1; k <= s.steps; ++k) out << ",alpha_bar_" << k;
    out << '\n';
    for (std::size_t t = 0; t < s.length; ++t) {
        out << t;
        for (std::size_t k = 1; k <= s.steps; ++k) out << ',' << s.beta(k, t);
        for (std::size_t k = 1; k <= s.steps; ++k) out << ',' << s.alpha_bar(k, t);
        out << '\n';
    }
}

inline void write_score_csv(const std::filesystem::path& path, const SignificanceScore& score,
                            const std::vector<std::string>& symbols) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out.precision(17);
    out << "t";
    for (const auto& s : symbols) out << ',' << s;
    out << '\n';
    for (std::size_t t = 0; t < score.length; ++t) {
        out << t;
        for (std::size_t n = 0; n < score.n_stocks; ++n) out << ',' << score.at(n, t);
        out << '\n';
    }
}

}  // namespace matchs
