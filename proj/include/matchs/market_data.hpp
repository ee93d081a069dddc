#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "matchs/errors.hpp"
#include "matchs/relations.hpp"
#include "matchs/rng.hpp"
#include "matchs/tensor.hpp"

namespace matchs {

// N stocks x P indicators x T trading days.
struct FeaturePanel {
    std::vector<std::string> symbols;
    std::vector<std::string> indicators;
    std::vector<std::string> timestamps;
    Tensor values;  // [N x P x T]

    std::size_t n_stocks() const { return symbols.size(); }
    std::size_t n_indicators() const { return indicators.size(); }
    std::size_t length() const { return timestamps.size(); }

    double at(std::size_t n, std::size_t p, std::size_t t) const {
        return values.values()[(n * n_indicators() + p) * length() + t];
    }

    std::size_t indicator_index(const std::string& name) const {
        auto it = std::find(indicators.begin(), indicators.end(), name);
        if (it == indicators.end()) throw DataError("unknown indicator '" + name + "'");
        return static_cast<std::size_t>(it - indicators.begin());
    }

    // One indicator of one stock over the whole time axis.
    std::vector<double> series(std::size_t n, std::size_t p) const {
        auto begin = values.values().begin() + static_cast<std::ptrdiff_t>((n * n_indicators() + p) * length());
        return {begin, begin + static_cast<std::ptrdiff_t>(length())};
    }
};

// ---------------------------------------------------------------------------
// CSV ingestion

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

inline std::string trim(std::string s) {
    auto not_space = [](unsigned char c) { return !std::isspace(c); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    return s;
}

inline bool valid_iso_date(const std::string& s) {
    int y = 0;
    unsigned m = 0, d = 0;
    char tail = 0;
    if (s.size() != 10 || std::sscanf(s.c_str(), "%4d-%2u-%2u%c", &y, &m, &d, &tail) != 3) return false;
    return std::chrono::year_month_day{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}}.ok();
}

struct SymbolTable {
    std::vector<std::string> dates;
    std::vector<std::vector<double>> columns;  // per requested indicator
};

inline SymbolTable read_symbol_csv(const std::filesystem::path& path, const std::vector<std::string>& indicators) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw DataError(path.string() + ":1: missing header");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto header = split_csv_line(line);
    for (auto& h : header) h = trim(h);
    if (header.empty() || header[0] != "date") throw DataError(path.string() + ":1: first column must be 'date'");

    std::vector<std::size_t> col_of;
    for (const auto& name : indicators) {
        auto it = std::find(header.begin() + 1, header.end(), name);
        if (it == header.end()) throw DataError(path.string() + ": unknown indicator '" + name + "'");
        col_of.push_back(static_cast<std::size_t>(it - header.begin()));
    }

    SymbolTable table;
    table.columns.resize(indicators.size());
    std::vector<std::optional<double>> last(indicators.size());
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (trim(line).empty()) continue;
        const auto where = path.string() + ":" + std::to_string(line_no);
        auto cells = split_csv_line(line);
        if (cells.size() != header.size()) throw DataError(where + ": expected " + std::to_string(header.size()) + " columns");
        const std::string date = trim(cells[0]);
        if (!valid_iso_date(date)) throw DataError(where + ": unparseable date '" + date + "'");
        if (!table.dates.empty() && date <= table.dates.back()) throw DataError(where + ": dates not strictly ascending");
        for (std::size_t k = 0; k < indicators.size(); ++k) {
            const std::string cell = trim(cells[col_of[k]]);
            if (cell.empty() || cell == "nan" || cell == "NaN" || cell == "NA") {
                if (!last[k]) throw DataError(where + ": leading gap in '" + indicators[k] + "' cannot be forward-filled");
                table.columns[k].push_back(*last[k]);
                continue;
            }
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(cell, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used != cell.size() || !std::isfinite(v)) throw DataError(where + ": unparseable value '" + cell + "'");
            last[k] = v;
            table.columns[k].push_back(v);
        }
        table.dates.push_back(date);
    }
    return table;
}

}  // namespace detail

// One CSV per symbol (`date,<ind1>,<ind2>,...`, ISO dates ascending); the
// symbol is the file stem. Series are aligned on the intersection of dates.
inline FeaturePanel ingest_csv(const std::vector<std::filesystem::path>& paths, const std::vector<std::string>& indicators) {
    if (paths.empty()) throw DataError("ingest_csv: no input files");
    if (indicators.empty()) throw DataError("ingest_csv: no indicators requested");
    std::vector<detail::SymbolTable> tables;
    for (const auto& p : paths) tables.push_back(detail::read_symbol_csv(p, indicators));

    std::set<std::string> common(tables.front().dates.begin(), tables.front().dates.end());
    for (std::size_t i = 1; i < tables.size(); ++i) {
        std::set<std::string> next;
        for (const auto& d : tables[i].dates)
            if (common.count(d)) next.insert(d);
        common.swap(next);
    }
    if (common.empty()) throw DataError("ingest_csv: empty date intersection across symbols");

    FeaturePanel panel;
    panel.indicators = indicators;
    panel.timestamps.assign(common.begin(), common.end());
    const std::size_t n = paths.size(), p = indicators.size(), t = panel.timestamps.size();
    std::vector<double> values(n * p * t);
    for (std::size_t s = 0; s < n; ++s) {
        panel.symbols.push_back(paths[s].stem().string());
        const auto& tab = tables[s];
        std::size_t out_t = 0;
        for (std::size_t row = 0; row < tab.dates.size(); ++row) {
            if (!common.count(tab.dates[row])) continue;
            for (std::size_t k = 0; k < p; ++k) values[(s * p + k) * t + out_t] = tab.columns[k][row];
            ++out_t;
        }
    }
    panel.values = Tensor({n, p, t}, std::move(values));
    return panel;
}

inline void write_symbol_csv(const std::filesystem::path& path, const FeaturePanel& panel, std::size_t stock) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << "date";
    for (const auto& name : panel.indicators) out << ',' << name;
    out << '\n';
    char buf[64];
    for (std::size_t t = 0; t < panel.length(); ++t) {
        out << panel.timestamps[t];
        for (std::size_t p = 0; p < panel.n_indicators(); ++p) {
            std::snprintf(buf, sizeof buf, "%.17g", panel.at(stock, p, t));
            out << ',' << buf;
        }
        out << '\n';
    }
}

// ---------------------------------------------------------------------------
// Synthetic clustered market

struct SynthParams {
    double factor_weight = 0.8;
    double noise_weight = 0.2;
    double factor_vol = 0.01;    // daily log-return volatility of each cluster factor
    double idio_vol = 0.01;      // daily log-return volatility of idiosyncratic noise
    double factor_drift = 0.0;
    double momentum = 0.0;       // AR(1) coefficient of factor returns
    double lagged_fraction = 0.0;  // share of each cluster that follows its factor one day late
    std::size_t random_relations = 0;
    double random_density = 0.1;
    double initial_price = 100.0;
    std::vector<std::string> indicators = {"close", "return", "ma5"};
};

inline const std::vector<std::string>& synthetic_indicator_names() {
    static const std::vector<std::string> names = {"close", "return", "ma5", "volume"};
    return names;
}

struct SyntheticMarket {
    FeaturePanel panel;
    std::vector<int> cluster_labels;
    std::vector<std::size_t> lags;  // per stock, in days
    RelationTensor relations;
};

inline std::vector<std::string> business_days(std::size_t count, std::chrono::sys_days start) {
    using namespace std::chrono;
    std::vector<std::string> out;
    char buf[16];
    for (sys_days d = start; out.size() < count; d += days{1}) {
        const weekday wd{d};
        if (wd == Saturday || wd == Sunday) continue;
        const year_month_day ymd{d};
        std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                      static_cast<unsigned>(ymd.day()));
        out.emplace_back(buf);
    }
    return out;
}

// Clusters are contiguous blocks of stocks. Each cluster owns a latent
// geometric random walk; a stock's log-return is factor_weight times its
// cluster's factor return (optionally one day late) plus noise_weight times
// idiosyncratic noise. Relation 0 ("same_cluster") links cluster mates;
// further "random_<k>" relations are symmetric Bernoulli(random_density).
inline SyntheticMarket synth_market(std::size_t n_stocks, std::size_t n_clusters, std::size_t length, Rng& rng,
                                    const SynthParams& params = {}) {
    if (n_clusters < 1 || n_stocks < n_clusters) throw ContractError("synth_market: need n_stocks >= n_clusters >= 1");
    if (length < 1) throw ContractError("synth_market: length must be >= 1");
    for (const auto& ind : params.indicators) {
        const auto& known = synthetic_indicator_names();
        if (std::find(known.begin(), known.end(), ind) == known.end()) {
            throw ConfigError("indicators", "unknown synthetic indicator '" + ind + "'");
        }
    }

    SyntheticMarket m;
    m.cluster_labels.resize(n_stocks);
    for (std::size_t i = 0; i < n_stocks; ++i) m.cluster_labels[i] = static_cast<int>(i * n_clusters / n_stocks);

    m.lags.assign(n_stocks, 0);
    for (std::size_t c = 0; c < n_clusters; ++c) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < n_stocks; ++i)
            if (m.cluster_labels[i] == static_cast<int>(c)) members.push_back(i);
        const auto lagged = static_cast<std::size_t>(std::lround(params.lagged_fraction * static_cast<double>(members.size())));
        const std::size_t n_lagged = std::min(lagged, members.size() - 1);  // keep one leader
        for (std::size_t k = 0; k < n_lagged; ++k) m.lags[members[members.size() - 1 - k]] = 1;
    }

    // Factor returns, with one extra leading day so lagged stocks have a value at t = 0.
    std::vector<std::vector<double>> factor(n_clusters, std::vector<double>(length + 1, 0.0));
    for (std::size_t c = 0; c < n_clusters; ++c) {
        double prev = 0.0;
        for (std::size_t t = 0; t <= length; ++t) {
            const double r = params.factor_drift + params.momentum * prev + params.factor_vol * rng.gaussian();
            factor[c][t] = r;
            prev = r;
        }
    }

    std::vector<double> start_price(n_stocks);
    for (auto& p : start_price) p = params.initial_price * std::exp(rng.uniform(-0.5, 0.5));

    std::vector<std::vector<double>> close(n_stocks, std::vector<double>(length));
    std::vector<std::vector<double>> ret(n_stocks, std::vector<double>(length, 0.0));
    for (std::size_t i = 0; i < n_stocks; ++i) {
        const auto& f = factor[static_cast<std::size_t>(m.cluster_labels[i])];
        double log_p = std::log(start_price[i]);
        for (std::size_t t = 0; t < length; ++t) {
            const double noise = params.idio_vol * rng.gaussian();
            if (t > 0) {
                ret[i][t] = params.factor_weight * f[t + 1 - m.lags[i]] + params.noise_weight * noise;
                log_p += ret[i][t];
            }
            close[i][t] = std::exp(log_p);
        }
    }

    FeaturePanel& panel = m.panel;
    panel.indicators = params.indicators;
    panel.timestamps = business_days(length, std::chrono::sys_days{std::chrono::year{2015} / 1 / 1});
    const std::size_t p = params.indicators.size();
    std::vector<double> values(n_stocks * p * length);
    for (std::size_t i = 0; i < n_stocks; ++i) {
        char sym[32];
        std::snprintf(sym, sizeof sym, "S%03zu", i);
        panel.symbols.emplace_back(sym);
        for (std::size_t k = 0; k < p; ++k) {
            const std::string& ind = params.indicators[k];
            double window_sum = 0.0;
            for (std::size_t t = 0; t < length; ++t) {
                double v = 0.0;
                window_sum += close[i][t];
                if (t >= 5) window_sum -= close[i][t - 5];
                if (ind == "close") {
                    v = close[i][t];
                } else if (ind == "return") {
                    v = ret[i][t];
                } else if (ind == "ma5") {
                    v = window_sum / static_cast<double>(std::min<std::size_t>(t + 1, 5));
                } else {  // volume: activity rises with the size of the move
                    v = 1e6 * (1.0 + 50.0 * std::abs(ret[i][t]));
                }
                values[(i * p + k) * length + t] = v;
            }
        }
    }
    panel.values = Tensor({n_stocks, p, length}, std::move(values));

    m.relations = RelationTensor(n_stocks, {"same_cluster"});
    for (std::size_t i = 0; i < n_stocks; ++i)
        for (std::size_t j = i + 1; j < n_stocks; ++j)
            if (m.cluster_labels[i] == m.cluster_labels[j]) m.relations.connect(i, j, 0);
    for (std::size_t r = 0; r < params.random_relations; ++r) {
        const std::size_t k = m.relations.add_relation("random_" + std::to_string(r));
        for (std::size_t i = 0; i < n_stocks; ++i)
            for (std::size_t j = i + 1; j < n_stocks; ++j)
                if (rng.uniform() < params.random_density) m.relations.connect(i, j, k);
    }
    return m;
}

// ---------------------------------------------------------------------------
// Normalisation

struct NormStats {
    std::size_t n_stocks = 0;
    std::size_t n_indicators = 0;
    std::vector<double> mean;  // [N x P]
    std::vector<double> std;   // [N x P], 1 substituted for zero variance

    double denormalize(double value, std::size_t n, std::size_t p) const {
        return value * std[n * n_indicators + p] + mean[n * n_indicators + p];
    }
    double normalize(double value, std::size_t n, std::size_t p) const {
        return (value - mean[n * n_indicators + p]) / std[n * n_indicators + p];
    }
};

// Per-stock, per-indicator z-score using statistics of days [0, fit_end).
inline std::pair<FeaturePanel, NormStats> normalize(const FeaturePanel& panel, std::size_t fit_end) {
    const std::size_t n = panel.n_stocks(), p = panel.n_indicators(), t = panel.length();
    if (fit_end == 0 || fit_end > t) throw ContractError("normalize: fit range must be within the panel");
    NormStats stats{n, p, std::vector<double>(n * p), std::vector<double>(n * p)};
    FeaturePanel out = panel;
    std::vector<double> values(panel.values.values());
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t k = 0; k < p; ++k) {
            double mu = 0.0;
            for (std::size_t i = 0; i < fit_end; ++i) mu += panel.at(s, k, i);
            mu /= static_cast<double>(fit_end);
            double var = 0.0;
            for (std::size_t i = 0; i < fit_end; ++i) var += (panel.at(s, k, i) - mu) * (panel.at(s, k, i) - mu);
            var /= static_cast<double>(fit_end);
            double sd = std::sqrt(var);
            if (!(sd > 1e-12 * std::max(1.0, std::abs(mu)))) {
                std::cerr << "warning: zero variance for " << panel.symbols[s] << "/" << panel.indicators[k]
                          << "; using unit divisor\n";
                sd = 1.0;
            }
            stats.mean[s * p + k] = mu;
            stats.std[s * p + k] = sd;
            for (std::size_t i = 0; i < t; ++i) values[(s * p + k) * t + i] = (panel.at(s, k, i) - mu) / sd;
        }
    out.values = Tensor(panel.values.shape(), std::move(values));
    return {std::move(out), std::move(stats)};
}

// Inverse of normalize for an [N x P x T'] tensor.
inline Tensor denormalize(const Tensor& values, const NormStats& stats) {
    if (values.rank() != 3 || values.dim(0) != stats.n_stocks || values.dim(1) != stats.n_indicators) {
        throw DimensionError("denormalize: tensor " + shape_str(values.shape()) + " does not match statistics");
    }
    const std::size_t t = values.dim(2);
    std::vector<double> out(values.values());
    for (std::size_t s = 0; s < stats.n_stocks; ++s)
        for (std::size_t k = 0; k < stats.n_indicators; ++k)
            for (std::size_t i = 0; i < t; ++i) {
                double& v = out[(s * stats.n_indicators + k) * t + i];
                v = stats.denormalize(v, s, k);
            }
    return Tensor(values.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// Windowing

struct TrainingInstance {
    std::size_t start = 0;  // first history day in the panel
    Tensor history;         // [N x P x L]
    Tensor target;          // [N x P x (L + horizon)]
    std::vector<std::uint8_t> future_mask;  // length L + horizon, trailing `horizon` ones

    std::size_t history_length() const { return history.dim(2); }
    std::size_t horizon() const { return target.dim(2) - history.dim(2); }
};

// Chronological day ranges: train [0, train_end), validation [train_end,
// val_end), test [val_end, total).
struct SplitRanges {
    std::size_t train_end = 0;
    std::size_t val_end = 0;
    std::size_t total = 0;
};

inline SplitRanges chronological_split(std::size_t total, double train_frac = 0.7, double val_frac = 0.1) {
    if (!(train_frac > 0.0) || val_frac < 0.0 || train_frac + val_frac >= 1.0) {
        throw ConfigError("train_frac", "split fractions must satisfy 0 < train, 0 <= val, train + val < 1");
    }
    SplitRanges r;
    r.total = total;
    r.train_end = static_cast<std::size_t>(std::floor(train_frac * static_cast<double>(total)));
    r.val_end = static_cast<std::size_t>(std::floor((train_frac + val_frac) * static_cast<double>(total)));
    return r;
}

// Sliding windows of `history_len` days followed by `horizon` future days.
// Only windows whose future days all fall inside [future_begin, future_end)
// are produced, so a split never forecasts across its boundary.
inline std::vector<TrainingInstance> make_windows(const FeaturePanel& panel, std::size_t history_len, std::size_t horizon,
                                                  std::size_t stride, std::size_t future_begin = 0,
                                                  std::size_t future_end = SIZE_MAX) {
    if (horizon < 1 || history_len < 1 || stride < 1) throw ContractError("make_windows: L, horizon and stride must be >= 1");
    const std::size_t n = panel.n_stocks(), p = panel.n_indicators(), t = panel.length();
    const std::size_t span = history_len + horizon;
    if (t < span) {
        throw DataError("empty dataset: series length " + std::to_string(t) + " < L + horizon = " + std::to_string(span));
    }
    future_end = std::min(future_end, t);
    std::vector<TrainingInstance> out;
    for (std::size_t s = 0; s + span <= t; s += stride) {
        const std::size_t first_future = s + history_len;
        if (first_future < future_begin || s + span > future_end) continue;
        TrainingInstance inst;
        inst.start = s;
        std::vector<double> hist(n * p * history_len), tgt(n * p * span);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < p; ++k)
                for (std::size_t j = 0; j < span; ++j) {
                    const double v = panel.at(i, k, s + j);
                    tgt[(i * p + k) * span + j] = v;
                    if (j < history_len) hist[(i * p + k) * history_len + j] = v;
                }
        inst.history = Tensor({n, p, history_len}, std::move(hist));
        inst.target = Tensor({n, p, span}, std::move(tgt));
        inst.future_mask.assign(span, 0);
        std::fill(inst.future_mask.begin() + static_cast<std::ptrdiff_t>(history_len), inst.future_mask.end(), 1);
        out.push_back(std::move(inst));
    }
    if (out.empty()) throw DataError("empty dataset: no window fits the requested range");
    return out;
}

}  // namespace matchs
