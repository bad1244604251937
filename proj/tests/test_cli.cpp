#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gacan/commands.hpp"

using namespace gacan;
namespace fs = std::filesystem;

namespace {

const char* base_config = R"(# tiny run used by the command tests
nodes = 3
minutes = 30
horizon = 2
mask = m,h,d
t_m = 4
t_h = 2
t_d = 1
heads = 2
cheb_order = 2
blocks = 1
channels = 4
max_steps = 6
eval_every = 3
batch = 2
val_samples = 4
lr = 0.01
speeds = speeds.csv
distances = distances.csv
synth.nodes = 3
synth.days = 6
synth.minutes = 30
seed = 5
)";

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> data_lines(const fs::path& p) {
    std::vector<std::string> out;
    std::istringstream in(slurp(p));
    std::string line;
    while (std::getline(in, line))
        if (!line.empty() && line[0] != '#') out.push_back(line);
    return out;
}

/// A scratch directory holding a config; the data is synthesized into it.
struct Workspace {
    fs::path dir;
    std::ostringstream out, err;

    explicit Workspace(const std::string& name, const std::string& extra = {}) {
        dir = fs::temp_directory_path() / ("gacan_cli_" + name);
        fs::remove_all(dir);
        fs::create_directories(dir);
        std::ofstream(dir / "run.cfg") << base_config << extra;
    }

    CommandArgs args(const std::string& sub = {}) const {
        CommandArgs a;
        a.config = (dir / "run.cfg").string();
        a.out = (sub.empty() ? dir : dir / sub).string();
        a.quiet = true;
        return a;
    }

    /// Replaces the value of a key already present in the config.
    void set(const std::string& key, const std::string& value) {
        std::string cfg = slurp(dir / "run.cfg");
        const auto at = cfg.find("\n" + key + " = ") + 1;
        cfg.replace(at, cfg.find('\n', at) - at, key + " = " + value);
        std::ofstream(dir / "run.cfg") << cfg;
    }

    int run(const std::string& cmd, const CommandArgs& a) { return run_command(cmd, a, out, err); }
    int run(const std::string& cmd) { return run(cmd, args()); }
};

} // namespace

TEST(CliSynth, WritesDeterministicFiles) {
    Workspace w("synth");
    ASSERT_EQ(w.run("synth"), exit_ok) << w.err.str();
    EXPECT_EQ(data_lines(w.dir / "speeds.csv").size(), 1u + 6u * 48u);
    const std::string speeds = slurp(w.dir / "speeds.csv");
    const std::string dist = slurp(w.dir / "distances.csv");
    EXPECT_EQ(speeds.rfind("# config_hash=", 0), 0u);
    EXPECT_EQ(dist.rfind("# config_hash=", 0), 0u);
    const auto truth = nlohmann::json::parse(slurp(w.dir / "truth.json"));
    EXPECT_EQ(truth["slices"], 288);
    EXPECT_TRUE(truth.contains("config_hash"));

    ASSERT_EQ(w.run("synth", w.args("again")), exit_ok);
    EXPECT_EQ(slurp(w.dir / "again" / "speeds.csv"), speeds);
    EXPECT_EQ(slurp(w.dir / "again" / "distances.csv"), dist);
    EXPECT_EQ(slurp(w.dir / "again" / "truth.json"), slurp(w.dir / "truth.json"));
}

TEST(CliSynth, ZeroDaysIsConfigErrorAndBadOutputIsDataError) {
    Workspace w("synth_bad", "synth.days = 0\n");
    EXPECT_EQ(w.run("synth"), exit_config);
    Workspace v("synth_unwritable");
    CommandArgs a = v.args();
    a.out = "/dev/null/cannot_exist";
    EXPECT_NE(v.run("synth", a), exit_ok);
}

TEST(CliTrain, OutputsCarryHashAndRerunIsByteIdentical) {
    Workspace w("train");
    ASSERT_EQ(w.run("synth"), exit_ok);
    ASSERT_EQ(w.run("preprocess", w.args("pre")), exit_ok) << w.err.str();
    const auto pre = nlohmann::json::parse(slurp(w.dir / "pre" / "preprocess.json"));
    EXPECT_EQ(pre["nodes"], 3);
    EXPECT_GT(pre["samples"]["test"], 0);

    ASSERT_EQ(w.run("train", w.args("a")), exit_ok) << w.err.str();
    ASSERT_EQ(w.run("train", w.args("b")), exit_ok) << w.err.str();
    for (const char* f : {"checkpoint.txt", "history.csv", "config.txt"}) {
        EXPECT_EQ(slurp(w.dir / "a" / f), slurp(w.dir / "b" / f)) << f;
    }
    const std::string hist = slurp(w.dir / "a" / "history.csv");
    EXPECT_EQ(hist.rfind("# config_hash=", 0), 0u);
    const auto rows = data_lines(w.dir / "a" / "history.csv");
    EXPECT_EQ(rows.front(), "step,train_loss,val_rmse");
    EXPECT_EQ(rows.size(), 1u + 3u); // steps 0, 3, 6
    EXPECT_NE(slurp(w.dir / "a" / "checkpoint.txt").find("config_hash="), std::string::npos);

    CommandArgs other = w.args("c");
    other.seed = 6;
    ASSERT_EQ(w.run("train", other), exit_ok);
    EXPECT_NE(slurp(w.dir / "c" / "checkpoint.txt"), slurp(w.dir / "a" / "checkpoint.txt"));
}

TEST(CliTrain, DataAndConfigFailuresMapToExitCodes) {
    Workspace missing("train_missing");
    EXPECT_EQ(missing.run("train"), exit_data);
    EXPECT_NE(missing.err.str().find("speeds.csv"), std::string::npos) << missing.err.str();

    Workspace weekly("train_weekly", "t_w = 1\n");
    ASSERT_EQ(weekly.run("synth"), exit_ok);
    {
        // Swap the mask to {m, w}: six days cannot feed a weekly window.
        std::string cfg = slurp(weekly.dir / "run.cfg");
        cfg.replace(cfg.find("mask = m,h,d"), 12, "mask = m,w");
        std::ofstream(weekly.dir / "run.cfg") << cfg;
    }
    EXPECT_EQ(weekly.run("train"), exit_data);
    EXPECT_NE(weekly.err.str().find("no eligible samples"), std::string::npos) << weekly.err.str();

    Workspace unknown("train_unknown", "hidden_size = 4\n");
    EXPECT_EQ(unknown.run("train"), exit_config);
    Workspace invalid("train_invalid", "heads = 0\n");
    EXPECT_EQ(invalid.run("synth"), exit_config); // the whole config is validated up front
    EXPECT_EQ(invalid.run("train"), exit_config);
    Workspace diverge("train_diverge");
    diverge.set("lr", "1e200");
    ASSERT_EQ(diverge.run("synth"), exit_ok);
    EXPECT_EQ(diverge.run("train"), exit_diverged);
    EXPECT_TRUE(fs::exists(diverge.dir / "checkpoint.last_good.txt"));
}

TEST(CliEval, ShapesAndMetricsContracts) {
    Workspace w("eval");
    ASSERT_EQ(w.run("synth"), exit_ok);
    ASSERT_EQ(w.run("train"), exit_ok);
    CommandArgs a = w.args("ev");
    a.checkpoint = (w.dir / "checkpoint.txt").string();
    ASSERT_EQ(w.run("eval", a), exit_ok) << w.err.str();
    const auto metrics = nlohmann::json::parse(slurp(w.dir / "ev" / "metrics.json"));
    ASSERT_EQ(metrics["horizon_minutes"], (std::vector<int>{30, 60}));
    for (std::size_t k = 0; k < 2; ++k) EXPECT_LE(metrics["mae"][k].get<double>(), metrics["rmse"][k].get<double>());
    const std::size_t samples = metrics["meta"]["samples"];
    EXPECT_EQ(metrics["meta"]["split"], "test");
    const auto rows = data_lines(w.dir / "ev" / "predictions.csv");
    EXPECT_EQ(rows.front(), "t0,horizon,node,pred,truth");
    EXPECT_EQ(rows.size() - 1, samples * 2 * 3);
    const auto ha = nlohmann::json::parse(slurp(w.dir / "ev" / "metrics_ha.json"));
    EXPECT_EQ(ha["meta"]["predictor"], "ha");
}

TEST(CliEval, RejectsConflictingCheckpoints) {
    Workspace w("eval_conflict");
    ASSERT_EQ(w.run("synth"), exit_ok);
    ASSERT_EQ(w.run("train"), exit_ok);
    const std::string ck = (w.dir / "checkpoint.txt").string();
    for (const char* key : {"horizon = 1\n", "heads = 3\n", "cheb_order = 3\n"}) {
        Workspace v(std::string("eval_conflict_") + key[0], key);
        std::string cfg = slurp(v.dir / "run.cfg");
        // Keep a single definition of the key under test.
        const std::string name = std::string(key).substr(0, std::string(key).find(' '));
        const auto first = cfg.find("\n" + name + " = ");
        if (first != std::string::npos) cfg.erase(first + 1, cfg.find('\n', first + 1) - first);
        std::ofstream(v.dir / "run.cfg") << cfg;
        fs::copy_file(w.dir / "speeds.csv", v.dir / "speeds.csv");
        fs::copy_file(w.dir / "distances.csv", v.dir / "distances.csv");
        CommandArgs a = v.args();
        a.checkpoint = ck;
        EXPECT_EQ(v.run("eval", a), exit_config) << key << v.err.str();
    }
    // Data with a different node count.
    Workspace n("eval_nodes", "synth.nodes = 4\n");
    std::string cfg = slurp(n.dir / "run.cfg");
    cfg.erase(cfg.find("nodes = 3\n"), 10);
    cfg.erase(cfg.find("synth.nodes = 3\n"), 16);
    std::ofstream(n.dir / "run.cfg") << cfg;
    ASSERT_EQ(n.run("synth"), exit_ok) << n.err.str();
    CommandArgs a = n.args();
    a.checkpoint = ck;
    EXPECT_EQ(n.run("eval", a), exit_config) << n.err.str();

    CommandArgs garbage = w.args();
    std::ofstream(w.dir / "garbage.txt") << "not a checkpoint\n";
    garbage.checkpoint = (w.dir / "garbage.txt").string();
    EXPECT_EQ(w.run("eval", garbage), exit_config);
}

TEST(CliPredict, ShapeAndHistoryErrors) {
    Workspace w("predict");
    ASSERT_EQ(w.run("synth"), exit_ok);
    ASSERT_EQ(w.run("train"), exit_ok);
    CommandArgs a = w.args("p");
    a.checkpoint = (w.dir / "checkpoint.txt").string();
    a.t0 = 287; // last slice: forecasts past the data
    ASSERT_EQ(w.run("predict", a), exit_ok) << w.err.str();
    const auto rows = data_lines(w.dir / "p" / "prediction.csv");
    ASSERT_EQ(rows.size(), 1u + 2u);
    EXPECT_EQ(rows[0], "horizon,node_0,node_1,node_2");
    for (const auto& r : rows) EXPECT_EQ(std::count(r.begin(), r.end(), ','), 3);

    a.t0 = 10; // the daily window needs 48 slices
    EXPECT_EQ(w.run("predict", a), exit_data);
    a.t0.reset();
    EXPECT_EQ(w.run("predict", a), exit_config);
}

TEST(CliOverfit, ConstantSignalEvalAndPredictAreNearExact) {
    Workspace w("overfit", "synth.daily_amp = 0\nsynth.weekly_amp = 0\nsynth.rush_amp = 0\nsynth.noise_std = 0\n");
    std::string cfg = slurp(w.dir / "run.cfg");
    cfg.replace(cfg.find("max_steps = 6"), 13, "max_steps = 300");
    cfg.replace(cfg.find("eval_every = 3"), 14, "eval_every = 50");
    std::ofstream(w.dir / "run.cfg") << cfg;
    ASSERT_EQ(w.run("synth"), exit_ok);
    ASSERT_EQ(w.run("train"), exit_ok) << w.err.str();
    CommandArgs a = w.args("ev");
    a.checkpoint = (w.dir / "checkpoint.txt").string();
    a.split = "train";
    ASSERT_EQ(w.run("eval", a), exit_ok) << w.err.str();
    const auto metrics = nlohmann::json::parse(slurp(w.dir / "ev" / "metrics.json"));
    const SpeedSeries s = load_speeds((w.dir / "speeds.csv").string(), 30);
    for (double r : metrics["rmse"]) EXPECT_LT(r, 0.01 * s.values(0, 0));

    a.t0 = 100;
    ASSERT_EQ(w.run("predict", a), exit_ok);
    const auto rows = data_lines(w.dir / "ev" / "prediction.csv");
    for (std::size_t h = 1; h < rows.size(); ++h) {
        const auto cells = split_view(rows[h], ',');
        for (std::size_t i = 0; i < 3; ++i) {
            const double truth = s.values(100 + h, i);
            EXPECT_NEAR(parse_double(cells[i + 1]), truth, 0.05 * truth);
        }
    }
}

TEST(CliGradcheck, ScopesAndNegativeControl) {
    Workspace w("gradcheck");
    CommandArgs a = w.args();
    a.scope = "primitives";
    a.trials = 2;
    EXPECT_EQ(w.run("gradcheck", a), exit_ok) << w.out.str();
    a.inject_fault = true;
    EXPECT_EQ(w.run("gradcheck", a), exit_check_failed);
    EXPECT_NE(w.out.str().find("FAIL"), std::string::npos);
    a.inject_fault = false;
    a.scope = "model";
    EXPECT_EQ(w.run("gradcheck", a), exit_ok) << w.out.str();
    a.scope = "block";
    EXPECT_EQ(w.run("gradcheck", a), exit_ok) << w.out.str();
    a.scope = "everything";
    EXPECT_EQ(w.run("gradcheck", a), exit_config);
    EXPECT_EQ(data_lines(w.dir / "gradcheck.csv").front(), "scope,name,checks,worst_rel_error,tolerance,pass");
}

TEST(CliGradcheck, TrainedCheckpointScope) {
    Workspace w("gradcheck_ck");
    ASSERT_EQ(w.run("synth"), exit_ok);
    ASSERT_EQ(w.run("train"), exit_ok);
    CommandArgs a = w.args();
    a.scope = "model";
    a.checkpoint = (w.dir / "checkpoint.txt").string();
    EXPECT_EQ(w.run("gradcheck", a), exit_ok) << w.out.str();
    a.inject_fault = true;
    EXPECT_EQ(w.run("gradcheck", a), exit_check_failed);
}

TEST(CliAblate, RowCountAndRerun) {
    Workspace w("ablate", "buckets = 1,2\n");
    ASSERT_EQ(w.run("synth"), exit_ok);
    CommandArgs a = w.args("x");
    a.modes = "a,c";
    ASSERT_EQ(w.run("ablate", a), exit_ok) << w.err.str();
    const auto rows = data_lines(w.dir / "x" / "ablation.csv");
    ASSERT_EQ(rows.size(), 1u + 2u * 2u);
    EXPECT_EQ(rows[0], "mode,horizon_minutes,mae,rmse");
    EXPECT_EQ(rows[1].substr(0, 5), "a,30,");
    EXPECT_EQ(rows[4].substr(0, 5), "c,60,");
    a.out = (w.dir / "y").string();
    ASSERT_EQ(w.run("ablate", a), exit_ok);
    EXPECT_EQ(slurp(w.dir / "x" / "ablation.csv"), slurp(w.dir / "y" / "ablation.csv"));
    a.modes = "a,q";
    EXPECT_EQ(w.run("ablate", a), exit_config);
}

TEST(CliBinary, ExitCodesThroughTheExecutable) {
    Workspace w("binary");
    const std::string exe = GACAN_CLI_PATH;
    auto code = [&](const std::string& args) {
        const int status = std::system((exe + " " + args + " >/dev/null 2>&1").c_str());
        return WEXITSTATUS(status);
    };
    const std::string cfg = "--config " + (w.dir / "run.cfg").string() + " --out " + w.dir.string();
    EXPECT_EQ(code("--help"), 0);
    EXPECT_EQ(code(cfg + " synth"), 0);
    EXPECT_TRUE(fs::exists(w.dir / "speeds.csv"));
    EXPECT_EQ(code(cfg + " --seed 9 gradcheck --scope primitives --trials 1"), 0);
    EXPECT_EQ(code(cfg + " gradcheck --scope primitives --trials 1 --inject-fault"), 1);
    EXPECT_EQ(code("frobnicate"), 2);
    EXPECT_EQ(code(cfg + " eval"), 2); // --checkpoint is required
    EXPECT_EQ(code("--config /nonexistent.cfg synth"), 2);
}
