// matchs: command-line driver.
//
//   matchs <command> [--config FILE] [--<key> VALUE ...]
//
// Commands: gen-data, train, sample, eval, backtest, describe.
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
// Errors are reported as one JSON line on stderr.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "matchs/checkpoint.hpp"
#include "matchs/experiment.hpp"
#include "matchs/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace matchs;

namespace {

// Usage-level failures (missing inputs, bad invocation) that map to exit 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

fs::path report_dir(const RunConfig& cfg) {
    if (const char* env = std::getenv("MATCHS_REPORT_DIR"); env && *env) return env;
    return cfg.report_dir;
}

void write_manifest(const RunConfig& cfg, const std::string& command, const json& extra = json::object()) {
    const fs::path dir = report_dir(cfg);
    fs::create_directories(dir);
    json m;
    m["command"] = command;
    m["config_hash"] = cfg.hash();
    m["seed"] = cfg.seed;
    m["version"] = kVersion;
    m["config"] = cfg.to_json();
    for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
    std::ofstream(dir / "manifest.json", std::ios::trunc) << m.dump(2) << '\n';
}

fs::path checkpoint_path(const RunConfig& cfg) {
    const fs::path p = cfg.checkpoint.empty() ? fs::path(cfg.ckpt_dir) / "best.ckpt" : fs::path(cfg.checkpoint);
    if (!fs::exists(p)) throw UsageError("checkpoint not found: " + p.string());
    return p;
}

MatchsDenoiser load_model(const RunConfig& cfg, const fs::path& ckpt) {
    MatchsDenoiser net(cfg.denoiser(), cfg.seed);
    restore_parameters(net.named_parameters(), load_checkpoint(ckpt));
    return net;
}

int cmd_gen_data(const RunConfig& cfg) {
    const SyntheticMarket m = synthesize(cfg);
    const fs::path dir = cfg.data_dir;
    fs::create_directories(dir);
    for (std::size_t i = 0; i < m.panel.n_stocks(); ++i) write_symbol_csv(dir / (m.panel.symbols[i] + ".csv"), m.panel, i);
    save_relations(dir / "relations.csv", m.relations, m.panel.symbols);
    std::cout << json{{"data_dir", dir.string()}, {"n_stocks", m.panel.n_stocks()}, {"length", m.panel.length()}}.dump() << '\n';
    return 0;
}

int cmd_train(const RunConfig& cfg) {
    const Experiment e = prepare(cfg);
    const NoiseOptions noise = cfg.noise();
    const auto train = make_examples(e.train, e.cluster_labels, e.masks, noise);
    const auto val = make_examples(e.val, e.cluster_labels, e.masks, noise);
    MatchsDenoiser net(cfg.denoiser(), cfg.seed);

    const fs::path ckpt_dir = cfg.ckpt_dir, reports = report_dir(cfg);
    fs::create_directories(ckpt_dir);
    fs::create_directories(reports);
    std::ofstream log(reports / "train_log.jsonl", std::ios::trunc);
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0;

    TrainCallbacks cb;
    cb.on_step = [&](std::size_t step, double loss, double lr) {
        log << json{{"step", step}, {"loss", loss}, {"lr", lr}}.dump() << '\n';
    };
    cb.on_epoch = [&](const EpochSummary& s) {
        json j{{"epoch", s.epoch}, {"train_loss", s.train_loss}, {"lr", s.lr}, {"k_histogram", s.k_histogram}};
        j["val_loss"] = std::isnan(s.val_loss) ? json(nullptr) : json(s.val_loss);
        log << j.dump() << '\n';
        log.flush();
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%03zu.ckpt", s.epoch);
        save_checkpoint(ckpt_dir / name, net.named_parameters());
        const double score = std::isnan(s.val_loss) ? s.train_loss : s.val_loss;
        if (score < best) {
            best = score;
            best_epoch = s.epoch;
            save_checkpoint(ckpt_dir / "best.ckpt", net.named_parameters());
        }
        std::cerr << "epoch " << s.epoch << " train_loss " << s.train_loss << " val_loss " << s.val_loss << '\n';
    };
    const TrainLog result = train_denoiser(net, train, val, cfg.training(), cb);
    write_manifest(cfg, "train", {{"best_epoch", best_epoch}, {"best_loss", best}, {"steps", result.step_losses.size()}});
    std::cout << json{{"best_checkpoint", (ckpt_dir / "best.ckpt").string()}, {"best_epoch", best_epoch},
                      {"best_loss", best}}
                     .dump()
              << '\n';
    return 0;
}

// forecasts.csv: one row per (test window, stock, indicator); samples are in
// normalised units at the first future position. The movement indicator gets
// its own rows when it is not close.
void write_forecasts(const fs::path& path, const Experiment& e, const std::vector<CloseForecast>& fc) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out.precision(17);
    const std::size_t s_count = fc.front().samples.front().size();
    out << "start,date,symbol,indicator";
    for (std::size_t s = 0; s < s_count; ++s) out << ",s" << s;
    out << '\n';
    auto rows = [&](const CloseForecast& f, const std::vector<std::vector<double>>& ch, const std::string& name) {
        for (std::size_t i = 0; i < ch.size(); ++i) {
            out << f.start << ',' << e.raw.timestamps[f.start + e.cfg.L - 1] << ',' << e.raw.symbols[i] << ',' << name;
            for (double v : ch[i]) out << ',' << v;
            out << '\n';
        }
    };
    for (const auto& f : fc) {
        rows(f, f.samples, e.cfg.close_indicator);
        rows(f, f.movement, e.cfg.movement_indicator);
    }
}

std::vector<CloseForecast> read_forecasts(const fs::path& path, const Experiment& e) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    std::string line;
    std::getline(in, line);
    std::vector<CloseForecast> out;
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < e.raw.symbols.size(); ++i) index[e.raw.symbols[i]] = i;
    const bool by_return = e.cfg.movement_channel() != e.cfg.close_channel();
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string start, date, sym, ind, cell;
        std::getline(ss, start, ',');
        std::getline(ss, date, ',');
        std::getline(ss, sym, ',');
        std::getline(ss, ind, ',');
        std::vector<double> samples;
        while (std::getline(ss, cell, ',')) samples.push_back(std::stod(cell));
        const auto it = index.find(sym);
        const bool is_close = ind == e.cfg.close_indicator;
        if (it == index.end() || samples.empty() || (!is_close && ind != e.cfg.movement_indicator))
            throw DataError(path.string() + ":" + std::to_string(line_no) + ": malformed forecast row");
        const std::size_t st = std::stoul(start);
        if (out.empty() || out.back().start != st) {
            out.push_back({st, std::vector<std::vector<double>>(e.raw.n_stocks()), {}});
            if (by_return) out.back().movement.resize(e.raw.n_stocks());
        }
        (is_close ? out.back().samples : out.back().movement)[it->second] = std::move(samples);
    }
    if (out.empty()) throw DataError(path.string() + ": no forecasts");
    for (const auto& f : out)
        for (std::size_t i = 0; i < f.samples.size(); ++i)
            if (f.samples[i].empty() || (by_return && f.movement[i].empty()))
                throw DataError(path.string() + ": forecasts for window " + std::to_string(f.start) +
                                " do not match the configured indicators; rerun `sample`");
    return out;
}

std::vector<CloseForecast> run_sampling(const Experiment& e, const fs::path& ckpt) {
    MatchsDenoiser net = load_model(e.cfg, ckpt);
    const auto examples = make_examples(e.test, e.cluster_labels, e.masks, e.cfg.noise());
    const Rng base = Rng::stream(e.cfg.seed, "sample");
    std::vector<CloseForecast> out;
    for (std::size_t w = 0; w < examples.size(); ++w) {
        out.push_back(forecast_window(net, examples[w], e.test[w].start, base.fork(w), e.cfg.n_samples,
                                      e.cfg.close_channel(), e.cfg.movement_channel()));
        std::cerr << "\rsampled " << (w + 1) << "/" << examples.size() << std::flush;
    }
    std::cerr << '\n';
    return out;
}

int cmd_sample(const RunConfig& cfg) {
    const fs::path ckpt = checkpoint_path(cfg);
    const Experiment e = prepare(cfg);
    const auto fc = run_sampling(e, ckpt);
    const fs::path dir = report_dir(cfg);
    fs::create_directories(dir);
    write_forecasts(dir / "forecasts.csv", e, fc);
    write_manifest(cfg, "sample", {{"checkpoint", ckpt.string()}});
    std::cout << json{{"forecasts", (dir / "forecasts.csv").string()}, {"windows", fc.size()}}.dump() << '\n';
    return 0;
}

// Reuses forecasts.csv from a previous `sample`, otherwise samples now.
std::vector<CloseForecast> obtain_forecasts(const Experiment& e, const fs::path& ckpt) {
    const fs::path path = report_dir(e.cfg) / "forecasts.csv";
    if (fs::exists(path)) return read_forecasts(path, e);
    auto fc = run_sampling(e, ckpt);
    fs::create_directories(path.parent_path());
    write_forecasts(path, e, fc);
    return fc;
}

int cmd_eval(const RunConfig& cfg) {
    const fs::path ckpt = checkpoint_path(cfg);
    const Experiment e = prepare(cfg);
    const auto fc = obtain_forecasts(e, ckpt);
    const SplitEvaluation ev =
        score_forecasts(fc, cfg.L, e.raw, e.stats, cfg.close_channel(), cfg.movement_channel(), cfg.dead_zone);
    MetricReport r;
    r.accuracy = ev.movement.accuracy;
    r.f1 = ev.movement.f1;
    r.mcc = ev.movement.mcc;
    r.crps = ev.crps;
    r.n_days = fc.size();
    r.k = cfg.k;
    if (fc.size() >= 2) {
        const BacktestLedger ledger = backtest(ev.predicted_returns, ev.realized_returns, e.raw.symbols, cfg.k, cfg.cost_bps);
        r.sharpe = ledger.sharpe_ratio;
        r.irr = ledger.cumulative;
    }
    const fs::path dir = report_dir(cfg);
    std::ofstream(dir / "metrics.json", std::ios::trunc) << r.to_json().dump(2) << '\n';
    write_manifest(cfg, "eval", {{"checkpoint", ckpt.string()}, {"metrics", r.to_json()}});
    std::cout << r.to_json().dump() << '\n';
    return 0;
}

int cmd_backtest(const RunConfig& cfg) {
    const fs::path ckpt = checkpoint_path(cfg);
    const Experiment e = prepare(cfg);
    const auto fc = obtain_forecasts(e, ckpt);
    const SplitEvaluation ev =
        score_forecasts(fc, cfg.L, e.raw, e.stats, cfg.close_channel(), cfg.movement_channel(), cfg.dead_zone);
    const BacktestLedger ledger = backtest(ev.predicted_returns, ev.realized_returns, e.raw.symbols, cfg.k, cfg.cost_bps);
    const fs::path dir = report_dir(cfg);
    write_trades_csv(dir / "trades.csv", ledger, ev.day_labels);
    {
        std::ofstream out(dir / "daily_returns.csv", std::ios::trunc);
        out.precision(17);
        out << "date,return\n";
        for (std::size_t d = 0; d < ledger.daily_returns.size(); ++d) out << ev.day_labels[d] << ',' << ledger.daily_returns[d] << '\n';
    }
    json summary{{"k", cfg.k}, {"n_days", ledger.daily_returns.size()}, {"irr", ledger.cumulative}};
    summary["sharpe"] = ledger.sharpe_ratio.degenerate ? json(nullptr) : json(ledger.sharpe_ratio.value);
    std::ofstream(dir / "backtest.json", std::ios::trunc) << summary.dump(2) << '\n';
    write_manifest(cfg, "backtest", {{"checkpoint", ckpt.string()}, {"backtest", summary}});
    std::cout << summary.dump() << '\n';
    return 0;
}

int cmd_describe(const RunConfig& cfg) {
    cfg.validate();
    const MatchsDenoiser net(cfg.denoiser(), cfg.seed);
    json j;
    j["parameters"] = net.parameter_count();
    j["groups"] = net.describe();
    j["config_hash"] = cfg.hash();
    j["version"] = kVersion;
    const fs::path rel = relations_path(cfg);
    if (fs::exists(rel)) {
        const Experiment e = prepare(cfg);
        j["heads"] = head_grouping_report(e.relations, *e.masks);
        j["windows"] = {{"train", e.train.size()}, {"val", e.val.size()}, {"test", e.test.size()}};
    }
    std::cout << j.dump(2) << '\n';
    return 0;
}

void report_error(const std::string& kind, const std::string& message, const std::string& field = "") {
    json j{{"error", kind}, {"message", message}};
    if (!field.empty()) j["field"] = field;
    std::cerr << j.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Relation-aware diffusion forecasting of stock panels"};
    app.require_subcommand(1);
    std::string config_file;
    std::map<std::string, std::string> overrides;

    const std::vector<std::pair<std::string, std::string>> commands = {
        {"gen-data", "write a synthetic clustered market to data_dir"},
        {"train", "train the denoiser and write checkpoints"},
        {"sample", "sample test-split forecasts from a checkpoint"},
        {"eval", "movement metrics and CRPS on the test split"},
        {"backtest", "top-k daily portfolio on the test split"},
        {"describe", "parameter counts and head grouping"},
    };
    for (const auto& [name, help] : commands) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config_file, "key = value configuration file");
        for (const auto& entry : RunConfig::entries()) {
            sub->add_option_function<std::string>(
                std::string("--") + entry.key, [&overrides, key = std::string(entry.key)](const std::string& v) { overrides[key] = v; },
                std::string("[") + entry.section + "]");
        }
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        report_error("usage", e.what());
        return 2;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        RunConfig cfg = config_file.empty() ? RunConfig{} : load_config(config_file);
        for (const auto& [k, v] : overrides) cfg.set(k, v);
        cfg.validate();
        if (command == "gen-data") return cmd_gen_data(cfg);
        if (command == "train") return cmd_train(cfg);
        if (command == "sample") return cmd_sample(cfg);
        if (command == "eval") return cmd_eval(cfg);
        if (command == "backtest") return cmd_backtest(cfg);
        return cmd_describe(cfg);
    } catch (const ConfigError& e) {
        report_error("config", e.what(), e.field());
        return 2;
    } catch (const UsageError& e) {
        report_error("usage", e.what());
        return 2;
    } catch (const CheckpointError& e) {
        report_error("checkpoint", e.what());
        return 1;
    } catch (const DataError& e) {
        report_error("data", e.what());
        return 1;
    } catch (const NumericError& e) {
        report_error("numeric", e.what());
        return 1;
    } catch (const std::exception& e) {
        report_error("runtime", e.what());
        return 1;
    }
}
