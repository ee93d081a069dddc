#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"([data]
data_dir = data
n_stocks = 4
n_clusters = 2
series_length = 300

[model]
d_model = 8
n_masked_heads = 2
n_unmasked_heads = 1
head_dim = 4
n_encoder_layers = 1
ff_dim = 8
dilations = 1,2
emb_dim = 8

[diffusion]
K = 10

[windows]
L = 8
horizon = 1
stride = 1

[train]
batch_size = 4
lr = 1e-3
epochs = 6

[eval]
n_samples = 3
k = 2
)";

struct Result {
    int code = -1;
    std::string out, err;
};

class Workspace {
   public:
    Workspace() {
        static int counter = 0;
        dir_ = fs::temp_directory_path() / ("matchs_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::create_directories(dir_);
        std::ofstream(dir_ / "run.cfg") << kTinyConfig;
    }
    ~Workspace() { fs::remove_all(dir_); }
    const fs::path& dir() const { return dir_; }

    Result run(const std::string& args, const std::string& env = "") const {
        const fs::path err = dir_ / "stderr.txt";
        const std::string cmd = "cd '" + dir_.string() + "' && " + env + " '" + MATCHS_CLI_PATH + "' " + args + " 2> '" +
                                err.string() + "'";
        Result r;
        FILE* pipe = ::popen(cmd.c_str(), "r");
        std::array<char, 4096> buf;
        std::size_t n;
        while ((n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
        const int status = ::pclose(pipe);
        r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
        r.err = slurp(err);
        return r;
    }

    static std::string slurp(const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        std::ostringstream os;
        os << in.rdbuf();
        return os.str();
    }

   private:
    fs::path dir_;
};

// Last line of stderr parsed as the machine-readable error.
nlohmann::json error_line(const std::string& err) {
    std::string last, line;
    std::istringstream is(err);
    while (std::getline(is, line))
        if (!line.empty()) last = line;
    return nlohmann::json::parse(last);
}

}  // namespace

TEST(Cli, GenDataIsByteIdenticalForTheSameSeed) {
    Workspace a, b;
    ASSERT_EQ(a.run("gen-data --config run.cfg --seed 7").code, 0);
    ASSERT_EQ(b.run("gen-data --config run.cfg --seed 7").code, 0);
    std::size_t files = 0;
    for (const auto& e : fs::directory_iterator(a.dir() / "data")) {
        const fs::path other = b.dir() / "data" / e.path().filename();
        ASSERT_TRUE(fs::exists(other)) << other;
        EXPECT_EQ(Workspace::slurp(e.path()), Workspace::slurp(other)) << e.path().filename();
        ++files;
    }
    EXPECT_EQ(files, 5u);  // 4 symbols + relations
    Workspace c;
    ASSERT_EQ(c.run("gen-data --config run.cfg --seed 8").code, 0);
    EXPECT_NE(Workspace::slurp(a.dir() / "data" / "S000.csv"), Workspace::slurp(c.dir() / "data" / "S000.csv"));
}

TEST(Cli, EvalWithoutCheckpointIsAUsageError) {
    Workspace w;
    ASSERT_EQ(w.run("gen-data --config run.cfg").code, 0);
    const Result r = w.run("eval --config run.cfg");
    EXPECT_EQ(r.code, 2);
    const auto j = error_line(r.err);
    EXPECT_NE(j["message"].get<std::string>().find("checkpoints/best.ckpt"), std::string::npos) << r.err;
}

TEST(Cli, ConfigErrorsExitTwoAndNameTheField) {
    Workspace w;
    std::ofstream(w.dir() / "bad.cfg") << "[train]\nlearning_rate = 0.1\n";
    Result r = w.run("train --config bad.cfg");
    EXPECT_EQ(r.code, 2);
    EXPECT_EQ(error_line(r.err)["field"], "learning_rate");
    r = w.run("train --config run.cfg --gamma 3");
    EXPECT_EQ(r.code, 2);
    EXPECT_EQ(error_line(r.err)["field"], "gamma");
    EXPECT_EQ(w.run("train --config run.cfg --no-such-flag 1").code, 2);
    EXPECT_EQ(w.run("frobnicate").code, 2);
}

TEST(Cli, RuntimeFailuresExitOne) {
    Workspace w;
    Result r = w.run("train --config run.cfg");  // no data generated yet
    EXPECT_EQ(r.code, 1);
    EXPECT_NO_THROW(error_line(r.err));
    ASSERT_EQ(w.run("gen-data --config run.cfg").code, 0);
    fs::create_directories(w.dir() / "checkpoints");
    std::ofstream(w.dir() / "checkpoints" / "best.ckpt") << "not a checkpoint at all";
    r = w.run("sample --config run.cfg");
    EXPECT_EQ(r.code, 1);
    EXPECT_EQ(error_line(r.err)["error"], "checkpoint");
}

TEST(Cli, FullPipelineWritesReportsAndReproduces) {
    Workspace w;
    ASSERT_EQ(w.run("gen-data --config run.cfg").code, 0);
    const Result train = w.run("train --config run.cfg");
    ASSERT_EQ(train.code, 0) << train.err;
    for (int e = 1; e <= 6; ++e) {
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%03d.ckpt", e);
        EXPECT_TRUE(fs::exists(w.dir() / "checkpoints" / name)) << name;
    }
    EXPECT_TRUE(fs::exists(w.dir() / "checkpoints" / "best.ckpt"));

    // epoch training loss strictly decreases over the first 5 epochs
    std::vector<double> epoch_loss;
    std::size_t steps = 0;
    std::ifstream log(w.dir() / "reports" / "train_log.jsonl");
    for (std::string line; std::getline(log, line);) {
        const auto j = nlohmann::json::parse(line);
        if (j.contains("epoch")) epoch_loss.push_back(j["train_loss"].get<double>());
        else ++steps;
    }
    ASSERT_GE(epoch_loss.size(), 5u);
    for (std::size_t e = 1; e < 5; ++e) EXPECT_LT(epoch_loss[e], epoch_loss[e - 1]) << "epoch " << e + 1;
    EXPECT_GE(steps, 10u);

    const auto manifest = nlohmann::json::parse(Workspace::slurp(w.dir() / "reports" / "manifest.json"));
    EXPECT_EQ(manifest["command"], "train");
    EXPECT_EQ(manifest["config_hash"].get<std::string>().size(), 16u);
    EXPECT_TRUE(manifest.contains("seed"));
    EXPECT_TRUE(manifest.contains("version"));

    ASSERT_EQ(w.run("sample --config run.cfg").code, 0);
    const std::string forecasts = Workspace::slurp(w.dir() / "reports" / "forecasts.csv");
    EXPECT_EQ(forecasts.rfind("start,date,symbol,indicator,s0,s1,s2\n", 0), 0u);
    EXPECT_NE(forecasts.find(",S000,return,"), std::string::npos);
    ASSERT_EQ(w.run("eval --config run.cfg").code, 0);
    const auto metrics = nlohmann::json::parse(Workspace::slurp(w.dir() / "reports" / "metrics.json"));
    for (const char* key : {"accuracy", "f1", "mcc", "crps", "sharpe", "irr"}) EXPECT_TRUE(metrics.contains(key)) << key;
    ASSERT_EQ(w.run("backtest --config run.cfg").code, 0);
    EXPECT_TRUE(fs::exists(w.dir() / "reports" / "trades.csv"));
    EXPECT_TRUE(fs::exists(w.dir() / "reports" / "daily_returns.csv"));
    EXPECT_TRUE(fs::exists(w.dir() / "reports" / "backtest.json"));

    // a fresh run into another report directory reproduces the forecasts and metrics exactly
    const Result again = w.run("eval --config run.cfg", "MATCHS_REPORT_DIR=again");
    ASSERT_EQ(again.code, 0) << again.err;
    EXPECT_EQ(Workspace::slurp(w.dir() / "again" / "forecasts.csv"), forecasts);
    EXPECT_EQ(Workspace::slurp(w.dir() / "again" / "metrics.json"), Workspace::slurp(w.dir() / "reports" / "metrics.json"));

    const Result describe = w.run("describe --config run.cfg");
    ASSERT_EQ(describe.code, 0);
    const auto d = nlohmann::json::parse(describe.out);
    EXPECT_GT(d["parameters"].get<std::size_t>(), 0u);
}

TEST(Cli, TrainingTrajectoryIsBitIdenticalForTheSameSeed) {
    Workspace a, b;
    for (const Workspace* w : {&a, &b}) {
        ASSERT_EQ(w->run("gen-data --config run.cfg").code, 0);
        ASSERT_EQ(w->run("train --config run.cfg --epochs 1 --max_steps 12").code, 0);
    }
    const std::string la = Workspace::slurp(a.dir() / "reports" / "train_log.jsonl");
    EXPECT_EQ(la, Workspace::slurp(b.dir() / "reports" / "train_log.jsonl"));
    EXPECT_EQ(Workspace::slurp(a.dir() / "checkpoints" / "best.ckpt"), Workspace::slurp(b.dir() / "checkpoints" / "best.ckpt"));
}
