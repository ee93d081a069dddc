#pragma once

// Dataset preparation from a RunConfig: ingest (or synthesise), normalise on
// the training range, split chronologically and cut windows.

#include <algorithm>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "matchs/market_data.hpp"
#include "matchs/pipeline.hpp"
#include "matchs/relations.hpp"
#include "matchs/run_config.hpp"

namespace matchs {

struct Experiment {
    RunConfig cfg;
    FeaturePanel raw;
    FeaturePanel normalized;
    NormStats stats;
    SplitRanges split;
    RelationTensor relations;
    std::vector<int> cluster_labels;
    std::shared_ptr<const HeadMaskSet> masks;
    std::vector<TrainingInstance> train, val, test;
};

inline SynthParams synth_params(const RunConfig& cfg) {
    SynthParams p;
    p.factor_weight = cfg.factor_weight;
    p.noise_weight = cfg.noise_weight;
    p.lagged_fraction = cfg.lagged_fraction;
    p.momentum = cfg.momentum;
    p.random_relations = cfg.random_relations;
    p.indicators = synthetic_indicator_names();
    return p;
}

inline SyntheticMarket synthesize(const RunConfig& cfg) {
    Rng rng = Rng::stream(cfg.seed, "data");
    return synth_market(cfg.n_stocks, cfg.n_clusters, cfg.series_length, rng, synth_params(cfg));
}

// Keeps only the configured indicators, in configured order.
inline FeaturePanel select_indicators(const FeaturePanel& panel, const std::vector<std::string>& names) {
    FeaturePanel out;
    out.symbols = panel.symbols;
    out.timestamps = panel.timestamps;
    out.indicators = names;
    const std::size_t n = panel.n_stocks(), t = panel.length(), p = names.size();
    std::vector<double> v(n * p * t);
    for (std::size_t k = 0; k < p; ++k) {
        const std::size_t src = panel.indicator_index(names[k]);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < t; ++j) v[(i * p + k) * t + j] = panel.at(i, src, j);
    }
    out.values = Tensor({n, p, t}, std::move(v));
    return out;
}

// Clusters for the significance score come from the first relation type.
inline Experiment prepare(const RunConfig& cfg, const FeaturePanel& raw, const RelationTensor& relations) {
    cfg.validate();
    Experiment e;
    e.cfg = cfg;
    e.raw = select_indicators(raw, cfg.indicator_list());
    e.relations = relations;
    if (relations.n() != e.raw.n_stocks()) throw DimensionError("relations cover a different number of stocks than the panel");
    e.cluster_labels = relations.g() ? clusters_from_relations(relations, {0}) : std::vector<int>(e.raw.n_stocks(), 0);
    e.split = chronological_split(e.raw.length(), cfg.train_frac, cfg.val_frac);
    auto [norm, stats] = normalize(e.raw, e.split.train_end);
    e.normalized = std::move(norm);
    e.stats = std::move(stats);
    const std::size_t unmasked = cfg.n_unmasked_heads;
    e.masks = std::make_shared<const HeadMaskSet>(masks_for(relations, cfg.mask(), cfg.n_masked_heads, unmasked));
    e.train = make_windows(e.normalized, cfg.L, cfg.horizon, cfg.stride, 0, e.split.train_end);
    if (e.split.val_end > e.split.train_end) {
        try {
            e.val = make_windows(e.normalized, cfg.L, cfg.horizon, 1, e.split.train_end, e.split.val_end);
        } catch (const DataError&) {
            e.val.clear();  // validation split too short for a single window
        }
    }
    e.test = make_windows(e.normalized, cfg.L, cfg.horizon, 1, e.split.val_end, e.split.total);
    return e;
}

inline std::vector<std::filesystem::path> symbol_files(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw DataError("data directory not found: " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.path().extension() == ".csv" && entry.path().stem() != "relations") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError("no symbol CSV files in " + dir.string());
    return files;
}

inline std::filesystem::path relations_path(const RunConfig& cfg) {
    return cfg.relations.empty() ? std::filesystem::path(cfg.data_dir) / "relations.csv" : std::filesystem::path(cfg.relations);
}

inline Experiment prepare(const RunConfig& cfg) {
    cfg.validate();
    FeaturePanel raw = ingest_csv(symbol_files(cfg.data_dir), cfg.indicator_list());
    RelationTensor rel = load_relations(relations_path(cfg), raw.symbols);
    return prepare(cfg, raw, rel);
}

}  // namespace matchs
