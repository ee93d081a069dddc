#pragma once

// Experiment configuration. The file format is flat `key = value` lines,
// optionally grouped under `[section]` headers (sections are cosmetic, keys
// are globally unique). Every key can be overridden from the command line.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "matchs/denoiser.hpp"
#include "matchs/errors.hpp"
#include "matchs/pipeline.hpp"

namespace matchs {

struct RunConfig {
    // data
    std::string data_dir = "data";
    std::size_t n_stocks = 8;
    std::size_t n_clusters = 2;
    std::size_t series_length = 400;
    double factor_weight = 0.8;
    double noise_weight = 0.2;
    double lagged_fraction = 0.75;
    double momentum = 0.0;
    std::size_t random_relations = 0;
    std::string indicators = "close,return,ma5";
    std::string close_indicator = "close";
    double train_frac = 0.7;
    double val_frac = 0.1;
    // model
    std::size_t d_model = 16;
    std::size_t n_masked_heads = 12;
    std::size_t n_unmasked_heads = 4;
    std::size_t head_dim = 16;
    std::size_t n_encoder_layers = 2;
    std::size_t ff_dim = 64;
    std::size_t kernel = 2;
    std::string dilations = "1,2,4,8";
    std::size_t emb_dim = 32;
    double emb_base = 1e4;
    std::string mask_mode = "relations";
    // diffusion
    std::size_t K = 100;
    double beta_base_max = 0.2;
    double gamma = 0.5;
    double alpha = 0.5;
    std::size_t window = 2;
    std::string noise_mode = "modulate";
    // windows
    std::size_t L = 16;
    std::size_t horizon = 3;
    std::size_t stride = 1;
    // training
    std::size_t batch_size = 16;
    double lr = 1e-4;
    double lr_decay = 1.0;
    std::size_t epochs = 100;
    std::size_t max_steps = 0;
    std::size_t seed = 7;
    // sampling / evaluation
    std::size_t n_samples = 8;
    std::size_t k = 5;
    double cost_bps = 0.0;
    double dead_zone = 0.0;
    std::string movement_indicator = "return";
    // paths
    std::string relations = "";
    std::string ckpt_dir = "checkpoints";
    std::string checkpoint = "";
    std::string report_dir = "reports";

    using Field = std::variant<std::string RunConfig::*, std::size_t RunConfig::*, double RunConfig::*>;

    struct Entry {
        const char* section;
        const char* key;
        Field field;
    };

    static const std::vector<Entry>& entries() {
        static const std::vector<Entry> e = {
            {"data", "data_dir", &RunConfig::data_dir},
            {"data", "n_stocks", &RunConfig::n_stocks},
            {"data", "n_clusters", &RunConfig::n_clusters},
            {"data", "series_length", &RunConfig::series_length},
            {"data", "factor_weight", &RunConfig::factor_weight},
            {"data", "noise_weight", &RunConfig::noise_weight},
            {"data", "lagged_fraction", &RunConfig::lagged_fraction},
            {"data", "momentum", &RunConfig::momentum},
            {"data", "random_relations", &RunConfig::random_relations},
            {"data", "indicators", &RunConfig::indicators},
            {"data", "close_indicator", &RunConfig::close_indicator},
            {"data", "train_frac", &RunConfig::train_frac},
            {"data", "val_frac", &RunConfig::val_frac},
            {"model", "d_model", &RunConfig::d_model},
            {"model", "n_masked_heads", &RunConfig::n_masked_heads},
            {"model", "n_unmasked_heads", &RunConfig::n_unmasked_heads},
            {"model", "head_dim", &RunConfig::head_dim},
            {"model", "n_encoder_layers", &RunConfig::n_encoder_layers},
            {"model", "ff_dim", &RunConfig::ff_dim},
            {"model", "kernel", &RunConfig::kernel},
            {"model", "dilations", &RunConfig::dilations},
            {"model", "emb_dim", &RunConfig::emb_dim},
            {"model", "emb_base", &RunConfig::emb_base},
            {"model", "mask_mode", &RunConfig::mask_mode},
            {"diffusion", "K", &RunConfig::K},
            {"diffusion", "beta_base_max", &RunConfig::beta_base_max},
            {"diffusion", "gamma", &RunConfig::gamma},
            {"diffusion", "alpha", &RunConfig::alpha},
            {"diffusion", "window", &RunConfig::window},
            {"diffusion", "noise_mode", &RunConfig::noise_mode},
            {"windows", "L", &RunConfig::L},
            {"windows", "horizon", &RunConfig::horizon},
            {"windows", "stride", &RunConfig::stride},
            {"train", "batch_size", &RunConfig::batch_size},
            {"train", "lr", &RunConfig::lr},
            {"train", "lr_decay", &RunConfig::lr_decay},
            {"train", "epochs", &RunConfig::epochs},
            {"train", "max_steps", &RunConfig::max_steps},
            {"train", "seed", &RunConfig::seed},
            {"eval", "n_samples", &RunConfig::n_samples},
            {"eval", "k", &RunConfig::k},
            {"eval", "cost_bps", &RunConfig::cost_bps},
            {"eval", "dead_zone", &RunConfig::dead_zone},
            {"eval", "movement_indicator", &RunConfig::movement_indicator},
            {"paths", "relations", &RunConfig::relations},
            {"paths", "ckpt_dir", &RunConfig::ckpt_dir},
            {"paths", "checkpoint", &RunConfig::checkpoint},
            {"paths", "report_dir", &RunConfig::report_dir},
        };
        return e;
    }

    static bool has_key(const std::string& key) {
        for (const auto& e : entries())
            if (key == e.key) return true;
        return false;
    }

    void set(const std::string& key, const std::string& value) {
        for (const auto& e : entries()) {
            if (key != e.key) continue;
            std::visit([&](auto member) { assign(this->*member, key, value); }, e.field);
            return;
        }
        throw ConfigError(key, "unknown configuration key");
    }

    std::string get(const std::string& key) const {
        for (const auto& e : entries()) {
            if (key != e.key) continue;
            return std::visit([&](auto member) { return format(this->*member); }, e.field);
        }
        throw ConfigError(key, "unknown configuration key");
    }

    std::vector<std::string> indicator_list() const { return split_list(indicators); }

    std::vector<std::size_t> dilation_list() const {
        std::vector<std::size_t> out;
        for (const auto& s : split_list(dilations)) {
            std::size_t v = 0;
            assign(v, "dilations", s);
            out.push_back(v);
        }
        return out;
    }

    std::size_t close_channel() const {
        const auto ind = indicator_list();
        for (std::size_t i = 0; i < ind.size(); ++i)
            if (ind[i] == close_indicator) return i;
        throw ConfigError("close_indicator", "'" + close_indicator + "' is not among the indicators");
    }

    // Channel whose forecast decides predicted direction and ranking. Anything
    // other than close is read as a return.
    std::size_t movement_channel() const {
        const auto ind = indicator_list();
        for (std::size_t i = 0; i < ind.size(); ++i)
            if (ind[i] == movement_indicator) return i;
        throw ConfigError("movement_indicator", "'" + movement_indicator + "' is not among the indicators");
    }

    MaskMode mask() const { return parse_mask_mode(mask_mode); }

    DenoiserConfig denoiser() const {
        DenoiserConfig c;
        c.n_indicators = indicator_list().size();
        c.length = L + horizon;
        c.d_model = d_model;
        c.n_masked_heads = n_masked_heads;
        c.n_unmasked_heads = n_unmasked_heads;
        c.head_dim = head_dim;
        c.n_encoder_layers = n_encoder_layers;
        c.ff_dim = ff_dim;
        c.kernel = kernel;
        c.dilations = dilation_list();
        c.steps = K;
        c.emb_base = emb_base;
        c.emb_dim = emb_dim;
        return c;
    }

    NoiseOptions noise() const {
        NoiseOptions o;
        o.steps = K;
        o.beta_max = beta_base_max;
        o.gamma = gamma;
        o.alpha = alpha;
        o.window = window;
        o.loss_weighting = noise_mode == "loss_weight";
        o.close_channel = close_channel();
        return o;
    }

    TrainOptions training() const {
        TrainOptions o;
        o.batch_size = batch_size;
        o.lr = lr;
        o.lr_decay = lr_decay;
        o.epochs = epochs;
        o.max_steps = max_steps;
        o.seed = seed;
        return o;
    }

    // Throws ConfigError naming the first offending field.
    void validate() const {
        if (n_stocks < 1) throw ConfigError("n_stocks", "must be >= 1");
        if (n_clusters < 1 || n_clusters > n_stocks) throw ConfigError("n_clusters", "must be in [1, n_stocks]");
        if (!(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac < 1.0))
            throw ConfigError("train_frac", "train_frac > 0, val_frac >= 0 and their sum < 1");
        if (!(lagged_fraction >= 0.0 && lagged_fraction < 1.0)) throw ConfigError("lagged_fraction", "must be in [0, 1)");
        if (!(momentum > -1.0 && momentum < 1.0)) throw ConfigError("momentum", "must be in (-1, 1)");
        if (indicator_list().empty()) throw ConfigError("indicators", "need at least one indicator");
        (void)close_channel();
        (void)movement_channel();
        (void)mask();
        if (L < 2) throw ConfigError("L", "history length must be >= 2");
        if (horizon < 1) throw ConfigError("horizon", "must be >= 1");
        if (stride < 1) throw ConfigError("stride", "must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
        if (!(lr > 0.0)) throw ConfigError("lr", "must be > 0");
        if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("lr_decay", "must be in (0, 1]");
        if (epochs < 1) throw ConfigError("epochs", "must be >= 1");
        if (n_samples < 1) throw ConfigError("n_samples", "must be >= 1");
        if (k < 1 || k > n_stocks) throw ConfigError("k", "portfolio size must be in [1, n_stocks]");
        if (cost_bps < 0.0) throw ConfigError("cost_bps", "must be >= 0");
        if (dead_zone < 0.0) throw ConfigError("dead_zone", "must be >= 0");
        if (noise_mode != "modulate" && noise_mode != "loss_weight")
            throw ConfigError("noise_mode", "expected modulate or loss_weight");
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha", "must be in [0, 1]");
        if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma", "must be in [0, 1]");
        if (!(beta_base_max > 0.0 && beta_base_max < 1.0)) throw ConfigError("beta_base_max", "must be in (0, 1)");
        if (window < 1) throw ConfigError("window", "must be >= 1");
        if (d_model < 1) throw ConfigError("d_model", "must be >= 1");
        denoiser().validate();
    }

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::object();
        for (const auto& e : entries()) j[e.key] = get(e.key);
        return j;
    }

    // Canonical text form; used for hashing and for writing config files.
    std::string to_text() const {
        std::ostringstream os;
        std::string section;
        for (const auto& e : entries()) {
            if (section != e.section) {
                if (!section.empty()) os << '\n';
                section = e.section;
                os << '[' << section << "]\n";
            }
            os << e.key << " = " << get(e.key) << '\n';
        }
        return os.str();
    }

    // FNV-1a over the canonical text.
    std::string hash() const {
        std::uint64_t h = 1469598103934665603ULL;
        for (unsigned char c : to_text()) {
            h ^= c;
            h *= 1099511628211ULL;
        }
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
        return buf;
    }

    static std::vector<std::string> split_list(const std::string& s) {
        std::vector<std::string> out;
        std::string cur;
        std::istringstream is(s);
        while (std::getline(is, cur, ',')) {
            const auto b = cur.find_first_not_of(" \t");
            if (b == std::string::npos) continue;
            out.push_back(cur.substr(b, cur.find_last_not_of(" \t") - b + 1));
        }
        return out;
    }

   private:
    static void assign(std::string& dst, const std::string&, const std::string& v) { dst = v; }

    static void assign(std::size_t& dst, const std::string& key, const std::string& v) {
        std::size_t pos = 0;
        long long x = 0;
        try {
            x = std::stoll(v, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (pos == 0 || pos != v.size() || x < 0) throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
        dst = static_cast<std::size_t>(x);
    }

    static void assign(double& dst, const std::string& key, const std::string& v) {
        std::size_t pos = 0;
        double x = 0.0;
        try {
            x = std::stod(v, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (pos == 0 || pos != v.size() || !std::isfinite(x)) throw ConfigError(key, "expected a number, got '" + v + "'");
        dst = x;
    }

    static std::string format(const std::string& v) { return v; }
    static std::string format(std::size_t v) { return std::to_string(v); }
    static std::string format(double v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        return os.str();
    }
};

// Parses the config text; unknown keys, duplicates and malformed lines are
// ConfigErrors.
inline RunConfig parse_config(std::istream& in, RunConfig base = {}) {
    std::string line;
    std::map<std::string, std::size_t> seen;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        line = line.substr(b, line.find_last_not_of(" \t\r") - b + 1);
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno), "malformed section header");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno), "expected key = value");
        auto key = line.substr(0, eq), value = line.substr(eq + 1);
        key.erase(key.find_last_not_of(" \t") + 1);
        const auto vb = value.find_first_not_of(" \t");
        value = vb == std::string::npos ? "" : value.substr(vb);
        if (seen.count(key)) throw ConfigError(key, "duplicate key (first set on line " + std::to_string(seen[key]) + ")");
        seen[key] = lineno;
        base.set(key, value);
    }
    return base;
}

inline RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config " + path.string());
    return parse_config(in);
}

}  // namespace matchs
