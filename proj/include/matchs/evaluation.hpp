#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "matchs/diffusion.hpp"
#include "matchs/errors.hpp"

namespace matchs {

struct ConfusionCounts {
    long tp = 0, fp = 0, tn = 0, fn = 0;
    long total() const { return tp + fp + tn + fn; }
};

struct MovementMetrics {
    double accuracy = 0.0;
    double f1 = 0.0;
    double mcc = 0.0;
    ConfusionCounts counts;
};

inline double mcc_from_counts(const ConfusionCounts& c) {
    const double tp = c.tp, fp = c.fp, tn = c.tn, fn = c.fn;
    const double denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
    if (denom == 0.0) return 0.0;
    return (tp * tn - fp * fn) / std::sqrt(denom);
}

inline MovementMetrics metrics_from_counts(const ConfusionCounts& c) {
    if (c.total() == 0) throw ContractError("movement metrics: no evaluated pairs");
    MovementMetrics m;
    m.counts = c;
    m.accuracy = static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
    const double f1_denom = 2.0 * c.tp + c.fp + c.fn;
    m.f1 = f1_denom == 0.0 ? 0.0 : 2.0 * c.tp / f1_denom;
    m.mcc = mcc_from_counts(c);
    return m;
}

// "Up" is the positive class. Pairs where either side is Flat are skipped.
inline MovementMetrics movement_metrics(std::span<const Movement> predicted, std::span<const Movement> truth) {
    if (predicted.size() != truth.size()) throw DimensionError("movement_metrics: length mismatch");
    if (predicted.empty()) throw ContractError("movement_metrics: empty input");
    ConfusionCounts c;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        if (predicted[i] == Movement::Flat || truth[i] == Movement::Flat) continue;
        const bool p = predicted[i] == Movement::Up, t = truth[i] == Movement::Up;
        if (p && t) ++c.tp;
        else if (p && !t) ++c.fp;
        else if (!p && !t) ++c.tn;
        else ++c.fn;
    }
    return metrics_from_counts(c);
}

// Empirical CRPS of an ensemble: mean|X - y| - 0.5 mean|X - X'| over all
// ordered pairs. The pair term uses the sorted-ensemble identity
// sum_{i,j} |x_i - x_j| = 2 sum_i (2i - S + 1) x_(i).
inline double crps(std::span<const double> samples, double observed) {
    if (samples.empty()) throw ContractError("crps: need at least one sample");
    std::vector<double> x(samples.begin(), samples.end());
    std::sort(x.begin(), x.end());
    const double s = static_cast<double>(x.size());
    double abs_err = 0.0, spread = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        abs_err += std::abs(x[i] - observed);
        spread += (2.0 * static_cast<double>(i) - s + 1.0) * x[i];
    }
    const double value = abs_err / s - spread / (s * s);
    return std::max(0.0, value);
}

inline double cumulative_return(std::span<const double> daily_returns) {
    double growth = 1.0;
    for (double r : daily_returns) growth *= 1.0 + r;
    return growth - 1.0;
}

struct SharpeResult {
    double value = 0.0;
    bool degenerate = false;  // zero volatility; value is 0 and should not be trusted
};

// Annualised mean / population standard deviation of daily returns.
inline SharpeResult sharpe(std::span<const double> daily_returns, double periods_per_year = 252.0) {
    if (daily_returns.size() < 2) throw ContractError("sharpe: need at least 2 observations");
    const double n = static_cast<double>(daily_returns.size());
    const double mu = std::accumulate(daily_returns.begin(), daily_returns.end(), 0.0) / n;
    double var = 0.0;
    for (double r : daily_returns) var += (r - mu) * (r - mu);
    var /= n;
    const double sd = std::sqrt(var);
    if (!(sd > 1e-15 * std::max(1.0, std::abs(mu)))) {
        std::cerr << "warning: sharpe ratio undefined for constant returns\n";
        return {0.0, true};
    }
    return {mu / sd * std::sqrt(periods_per_year), false};
}

struct Trade {
    std::size_t day = 0;
    std::string symbol;
    double predicted_return = 0.0;
    double realized_return = 0.0;
};

struct BacktestLedger {
    std::vector<double> daily_returns;
    std::size_t k = 0;
    double cumulative = 0.0;
    SharpeResult sharpe_ratio;
    std::vector<Trade> trades;
};

// Daily top-k long strategy. For every day, stocks are ranked by predicted
// next-day return (descending, ties by symbol), the top k are bought
// equal-weight at the close and sold at the next close. `cost_bps` is charged
// once per day on the whole book.
//   predicted, realized: [days][N]
inline BacktestLedger backtest(const std::vector<std::vector<double>>& predicted,
                               const std::vector<std::vector<double>>& realized,
                               const std::vector<std::string>& symbols, std::size_t k, double cost_bps = 0.0) {
    if (predicted.size() != realized.size()) throw DimensionError("backtest: forecasts and realised returns cover different days");
    if (predicted.size() < 2) throw ContractError("backtest: need at least 2 test days");
    const std::size_t n = symbols.size();
    if (k < 1 || k > n) throw ContractError("backtest: portfolio size must be in [1, N]");

    std::vector<std::size_t> by_symbol(n);
    std::iota(by_symbol.begin(), by_symbol.end(), std::size_t{0});
    std::sort(by_symbol.begin(), by_symbol.end(), [&](std::size_t a, std::size_t b) { return symbols[a] < symbols[b]; });

    BacktestLedger ledger;
    ledger.k = k;
    for (std::size_t d = 0; d < predicted.size(); ++d) {
        if (predicted[d].size() != n || realized[d].size() != n) throw DimensionError("backtest: day row has wrong width");
        std::vector<std::size_t> order = by_symbol;
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return predicted[d][a] > predicted[d][b]; });
        double acc = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            const std::size_t s = order[j];
            acc += realized[d][s];
            ledger.trades.push_back({d, symbols[s], predicted[d][s], realized[d][s]});
        }
        ledger.daily_returns.push_back(acc / static_cast<double>(k) - cost_bps * 1e-4);
    }
    ledger.cumulative = cumulative_return(ledger.daily_returns);
    ledger.sharpe_ratio = sharpe(ledger.daily_returns);
    return ledger;
}

inline void write_trades_csv(const std::filesystem::path& path, const BacktestLedger& ledger,
                             const std::vector<std::string>& day_labels = {}) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out.precision(17);
    out << "day,symbol,predicted_return,realized_return\n";
    for (const auto& t : ledger.trades) {
        if (t.day < day_labels.size()) out << day_labels[t.day];
        else out << t.day;
        out << ',' << t.symbol << ',' << t.predicted_return << ',' << t.realized_return << '\n';
    }
}

struct MetricReport {
    double accuracy = 0.0, f1 = 0.0, mcc = 0.0, crps = 0.0;
    SharpeResult sharpe;
    double irr = 0.0;  // cumulative return over the test period
    std::size_t n_days = 0;
    std::size_t k = 0;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["accuracy"] = accuracy;
        j["f1"] = f1;
        j["mcc"] = mcc;
        j["crps"] = crps;
        j["sharpe"] = sharpe.degenerate ? nlohmann::json(nullptr) : nlohmann::json(sharpe.value);
        j["irr"] = irr;
        j["n_days"] = n_days;
        j["k"] = k;
        return j;
    }
};

}  // namespace matchs
