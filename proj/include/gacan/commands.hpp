#pragma once

// The batch commands behind the `gacan` tool. Each returns a process exit
// code: 0 success, 1 failed check, 2 config error, 3 data error, 4 divergence.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "gacan/data.hpp"
#include "gacan/gradsuite.hpp"
#include "gacan/graph.hpp"
#include "gacan/model.hpp"
#include "gacan/runconfig.hpp"
#include "gacan/trainer.hpp"

namespace gacan {

enum ExitCode : int { exit_ok = 0, exit_check_failed = 1, exit_config = 2, exit_data = 3, exit_diverged = 4 };

struct CommandArgs {
    std::optional<std::string> config; // run config path
    std::optional<std::uint64_t> seed; // overrides the config seed
    std::string out = "gacan-out";
    std::string checkpoint;            // eval, predict, gradcheck
    std::optional<std::size_t> t0;     // predict
    std::string split = "test";        // eval
    std::string scope = "primitives";  // gradcheck
    std::optional<std::string> modes;  // ablate
    std::size_t trials = 100;          // gradcheck primitives
    bool inject_fault = false;         // gradcheck negative control
    bool quiet = false;
};

namespace cmd {

/// Raised for inputs that are well-formed but unusable (exit code 3).
class DataError : public Error {
public:
    using Error::Error;
};

inline RunConfig load_config(const CommandArgs& a) {
    RunConfig rc;
    if (a.config) {
        try {
            rc = load_run_config(*a.config);
        } catch (const IoError& e) {
            throw ConfigError(e.what());
        }
    }
    if (a.seed) set_seed(rc, *a.seed);
    return rc;
}

/// Validates the model and trainer settings; any failure is a config error.
inline void check_config(const RunConfig& rc) {
    try {
        ModelConfig m = rc.model;
        if (m.n_nodes == 0) m.n_nodes = 1; // filled in from the data later
        validate(m);
        validate(rc.train);
        if (!rc.data.buckets.empty()) {
            for (auto b : rc.data.buckets)
                if (b < 1 || b > m.horizon) throw ValidationError("buckets must lie in 1..horizon");
        }
        if (!(rc.data.sigma2 > 0.0)) throw ValidationError("sigma2 must be positive");
    } catch (const ConfigError&) {
        throw;
    } catch (const ValidationError& e) {
        throw ConfigError(e.what());
    }
}

inline std::filesystem::path out_dir(const CommandArgs& a) {
    std::filesystem::path p(a.out);
    std::error_code ec;
    std::filesystem::create_directories(p, ec);
    if (ec || !std::filesystem::is_directory(p)) throw IoError("cannot create output directory " + p.string());
    return p;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw IoError("cannot write " + p.string());
    return os;
}

inline std::string file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return hex64(fnv1a64(bytes));
}

struct LoadedData {
    SpeedSeries series;
    Tensor distances;
    SpectralOperator op;
    std::string dataset_id;
};

/// Reads the speeds and distances named in the config. Fills in the node
/// count when the config leaves it at 0; a conflicting count is a config error.
inline LoadedData load_data(RunConfig& rc) {
    if (rc.data.speeds.empty()) throw ConfigError("config sets no 'speeds' file");
    if (rc.data.distances.empty()) throw ConfigError("config sets no 'distances' file");
    LoadedData d;
    d.series = load_speeds(rc.data.speeds, rc.model.minutes);
    if (rc.model.n_nodes == 0) rc.model.n_nodes = d.series.nodes();
    if (rc.model.n_nodes != d.series.nodes()) {
        throw ConfigError("config says nodes = " + std::to_string(rc.model.n_nodes) + " but " + rc.data.speeds + " has " +
                          std::to_string(d.series.nodes()) + " sensors");
    }
    d.distances = load_distances(rc.data.distances, d.series.nodes());
    d.op = make_spectral_operator(build_adjacency(d.distances, rc.data.sigma2, rc.data.epsilon));
    d.dataset_id = hex64(fnv1a64(file_hash(rc.data.speeds) + file_hash(rc.data.distances)));
    return d;
}

inline std::vector<std::size_t> buckets_of(const RunConfig& rc) {
    return rc.data.buckets.empty() ? default_buckets(rc.model.horizon, rc.model.minutes) : rc.data.buckets;
}

inline std::vector<std::pair<std::string, std::string>> norm_entries(const NormStats& s) {
    return {{"norm.mean", join_doubles(s.mean)}, {"norm.std", join_doubles(s.std)}, {"norm.standardize", kv::from_bool(s.standardize)}};
}

inline std::optional<NormStats> norm_from(const Checkpoint& ck) {
    const std::string* mean = ck.find("norm.mean");
    const std::string* sd = ck.find("norm.std");
    const std::string* st = ck.find("norm.standardize");
    if (!mean || !sd || !st) return std::nullopt;
    NormStats s;
    s.mean = parse_doubles(*mean);
    s.std = parse_doubles(*sd);
    s.standardize = kv::to_bool("norm.standardize", *st);
    return s;
}

inline void write_config_echo(const std::filesystem::path& dir, const RunConfig& rc) {
    auto os = open_out(dir / "config.txt");
    os << "# config_hash=" << config_hash(rc) << '\n' << dump_run_config(rc);
}

inline Checkpoint read_checkpoint_file(const std::string& path) {
    if (path.empty()) throw ConfigError("no checkpoint given");
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open checkpoint " + path);
    try {
        return read_checkpoint(in);
    } catch (const ParseError& e) {
        throw ConfigError("checkpoint " + path + ": " + e.what());
    }
}

/// Loads a checkpoint's model and rejects it when a structural key the run
/// config sets explicitly (nodes, horizon, heads, cheb_order) disagrees.
inline GacanModel checkpoint_model(const Checkpoint& ck, const RunConfig& rc, const std::string& path) {
    GacanModel m;
    try {
        m = model_from_checkpoint(ck);
    } catch (const ValidationError& e) {
        throw ConfigError("checkpoint " + path + ": " + e.what());
    }
    const std::pair<const char*, std::size_t> keys[] = {
        {"nodes", rc.model.n_nodes}, {"horizon", rc.model.horizon}, {"heads", rc.model.heads}, {"cheb_order", rc.model.cheb_order}};
    const std::size_t have[] = {m.config.n_nodes, m.config.horizon, m.config.heads, m.config.cheb_order};
    for (std::size_t i = 0; i < 4; ++i) {
        if (rc.given.count(keys[i].first) && keys[i].second != have[i]) {
            throw ConfigError(std::string("checkpoint ") + path + " has " + keys[i].first + " = " + std::to_string(have[i]) +
                              ", config sets " + std::to_string(keys[i].second));
        }
    }
    return m;
}

/// Dataset for a checkpointed model: the model's windowing, the config's data
/// options and the checkpoint's normalization.
inline Dataset checkpoint_dataset(const LoadedData& data, const GacanModel& m, const Checkpoint& ck, const RunConfig& rc) {
    if (data.series.nodes() != m.config.n_nodes) {
        throw ConfigError("checkpoint expects " + std::to_string(m.config.n_nodes) + " nodes, data has " +
                          std::to_string(data.series.nodes()));
    }
    DataOptions opt = data_options(rc.data);
    Dataset d = prepare_dataset(data.series, m.config, opt);
    if (auto st = norm_from(ck)) {
        if (st->mean.size() != d.series.nodes()) throw ConfigError("checkpoint normalization does not match the node count");
        d.stats = *st;
        d.values = zero_mean(d.series.values, d.stats);
    }
    return d;
}

/// Runs `body`, mapping exceptions to exit codes and printing the reason.
template <class F>
int guarded(std::ostream& err, F&& body) {
    try {
        return body();
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return exit_config;
    } catch (const TrainingError& e) {
        err << "training diverged: " << e.what() << '\n';
        return exit_diverged;
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << '\n';
        return exit_diverged;
    } catch (const Error& e) {
        err << "data error: " << e.what() << '\n';
        return exit_data;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return exit_data;
    }
}

inline std::string fmt(double v) { return format_double(v); }

} // namespace cmd

/// speeds.csv, distances.csv and truth.json from the synth.* settings.
inline int cmd_synth(const CommandArgs& a, std::ostream& out, std::ostream& err) {
    return cmd::guarded(err, [&] {
        RunConfig rc = cmd::load_config(a);
        SynthData data;
        try {
            data = synth_generate(rc.synth);
        } catch (const ValidationError& e) {
            throw ConfigError(e.what());
        }
        const auto dir = cmd::out_dir(a);
        const std::string hash = config_hash(rc);
        {
            auto os = cmd::open_out(dir / "speeds.csv");
            write_speeds_csv(os, data.series, "config_hash=" + hash);
        }
        {
            auto os = cmd::open_out(dir / "distances.csv");
            write_distances_csv(os, data.distances, "config_hash=" + hash);
        }
        {
            nlohmann::json truth = data.truth;
            truth["config_hash"] = hash;
            auto os = cmd::open_out(dir / "truth.json");
            os << truth.dump(2) << '\n';
        }
        if (!a.quiet) {
            out << "wrote " << data.series.length() << " slices x " << data.series.nodes() << " nodes to " << dir.string() << '\n';
        }
        return exit_ok;
    });
}

/// Interpolated speeds, the adjacency and a JSON summary of the splits.
inline int cmd_preprocess(const CommandArgs& a, std::ostream& out, std::ostream& err) {
    return cmd::guarded(err, [&] {
        RunConfig rc = cmd::load_config(a);
        cmd::check_config(rc);
        cmd::LoadedData data = cmd::load_data(rc);
        const Dataset d = prepare_dataset(data.series, rc.model, data_options(rc.data));
        const auto dir = cmd::out_dir(a);
        const std::string hash = config_hash(rc);
        {
            auto os = cmd::open_out(dir / "clean_speeds.csv");
            write_speeds_csv(os, d.series, "config_hash=" + hash);
        }
        const Tensor w = build_adjacency(data.distances, rc.data.sigma2, rc.data.epsilon);
        {
            auto os = cmd::open_out(dir / "adjacency.csv");
            os << "# config_hash=" << hash << '\n' << "from,to,weight\n";
            for (std::size_t i = 0; i < w.dim(0); ++i)
                for (std::size_t j = 0; j < w.dim(1); ++j)
                    if (w(i, j) != 0.0) os << i << ',' << j << ',' << cmd::fmt(w(i, j)) << '\n';
        }
        nlohmann::ordered_json j;
        j["slices"] = d.series.length();
        j["nodes"] = d.series.nodes();
        j["missing_filled"] = data.series.missing_count();
        j["lambda_max"] = data.op.lambda_max;
        j["split"] = {{"train", {d.split.train.begin, d.split.train.end}},
                      {"val", {d.split.val.begin, d.split.val.end}},
                      {"test", {d.split.test.begin, d.split.test.end}}};
        j["samples"] = {{"train", d.train.size()}, {"val", d.val.size()}, {"test", d.test.size()}};
        j["norm_mean"] = d.stats.mean;
        j["norm_std"] = d.stats.std;
        j["meta"] = {{"config_hash", hash}, {"dataset_id", data.dataset_id}};
        auto os = cmd::open_out(dir / "preprocess.json");
        os << j.dump(2) << '\n';
        if (!a.quiet) out << "train/val/test samples: " << d.train.size() << '/' << d.val.size() << '/' << d.test.size() << '\n';
        return exit_ok;
    });
}

/// checkpoint.txt (best validation), history.csv and config.txt.
inline int cmd_train(const CommandArgs& a, std::ostream& out, std::ostream& err) {
    return cmd::guarded(err, [&] {
        RunConfig rc = cmd::load_config(a);
        cmd::check_config(rc);
        cmd::LoadedData data = cmd::load_data(rc);
        const Dataset d = prepare_dataset(data.series, rc.model, data_options(rc.data));
        const auto dir = cmd::out_dir(a);
        const std::string hash = config_hash(rc);
        cmd::write_config_echo(dir, rc);

        std::vector<std::pair<std::string, std::string>> extra{{"config_hash", hash}, {"dataset_id", data.dataset_id}};
        for (auto& kvp : cmd::norm_entries(d.stats)) extra.push_back(kvp);
        auto write_history = [&](const std::vector<HistoryRow>& rows) {
            auto os = cmd::open_out(dir / "history.csv");
            os << "# config_hash=" << hash << '\n' << "step,train_loss,val_rmse\n";
            for (const auto& r : rows) {
                os << r.step << ',' << (std::isnan(r.train_loss) ? std::string() : cmd::fmt(r.train_loss)) << ','
                   << cmd::fmt(r.val_rmse) << '\n';
            }
        };
        std::vector<HistoryRow> seen;
        ProgressFn progress = [&](const HistoryRow& r) {
            seen.push_back(r);
            if (!a.quiet) out << "step " << r.step << "  val_rmse " << r.val_rmse << '\n';
        };
        TrainResult result;
        try {
            result = train(init_model(rc.model), data.op, d, rc.train, progress);
        } catch (const TrainingError& e) {
            auto os = cmd::open_out(dir / "checkpoint.last_good.txt");
            auto ex = extra;
            ex.emplace_back("train.step", std::to_string(e.step()));
            write_checkpoint(os, model_checkpoint(e.last_good(), ex));
            write_history(seen);
            throw;
        }
        extra.emplace_back("train.best_step", std::to_string(result.best_step));
        extra.emplace_back("train.best_val_rmse", cmd::fmt(result.best_val_rmse));
        {
            auto os = cmd::open_out(dir / "checkpoint.txt");
            write_checkpoint(os, model_checkpoint(result.model, extra));
        }
        write_history(result.history);
        if (!a.quiet) {
            out << "best val_rmse " << result.best_val_rmse << " at step " << result.best_step << "; wrote " << (dir / "checkpoint.txt").string()
                << '\n';
        }
        return exit_ok;
    });
}

/// metrics.json, metrics_ha.json and predictions.csv for one split.
inline int cmd_eval(const CommandArgs& a, std::ostream& out, std::ostream& err) {
    return cmd::guarded(err, [&] {
        RunConfig rc = cmd::load_config(a);
        const Checkpoint ck = cmd::read_checkpoint_file(a.checkpoint);
        GacanModel m = cmd::checkpoint_model(ck, rc, a.checkpoint);
        rc.model = m.config;
        cmd::check_config(rc);
        cmd::LoadedData data = cmd::load_data(rc);
        const Dataset d = cmd::checkpoint_dataset(data, m, ck, rc);
        const std::vector<std::size_t>* origins = nullptr;
        if (a.split == "train") origins = &d.train;
        else if (a.split == "val") origins = &d.val;
        else if (a.split == "test") origins = &d.test;
        else throw ConfigError("unknown split '" + a.split + "' (expected train, val or test)");

        const auto dir = cmd::out_dir(a);
        const std::string hash = config_hash(rc);
        const std::vector<std::pair<std::string, std::string>> meta{
            {"config_hash", hash}, {"seed", std::to_string(rc.model.seed)}, {"dataset_id", data.dataset_id}, {"split", a.split}};
        auto preds = cmd::open_out(dir / "predictions.csv");
        preds << "# config_hash=" << hash << '\n' << "t0,horizon,node,pred,truth\n";
        const PredictionSink sink = [&](std::size_t t0, const Tensor& p, const Tensor& t) {
            for (std::size_t h = 0; h < p.dim(0); ++h)
                for (std::size_t i = 0; i < p.dim(1); ++i)
                    preds << t0 << ',' << h + 1 << ',' << i << ',' << cmd::fmt(p(h, i)) << ',' << cmd::fmt(t(h, i)) << '\n';
        };
        const auto buckets = cmd::buckets_of(rc);
        auto meta_model = meta;
        meta_model.emplace_back("predictor", "gacan");
        const MetricsReport r = evaluate(model_forecaster(m, data.op, d), d, *origins, buckets, meta_model, sink);
        auto meta_ha = meta;
        meta_ha.emplace_back("predictor", "ha");
        const MetricsReport ha = evaluate(ha_forecaster(d), d, *origins, buckets, meta_ha);
        {
            auto os = cmd::open_out(dir / "metrics.json");
            os << r.to_json().dump(2) << '\n';
        }
        {
            auto os = cmd::open_out(dir / "metrics_ha.json");
            os << ha.to_json().dump(2) << '\n';
        }
        if (!a.quiet) {
            for (std::size_t k = 0; k < r.buckets.size(); ++k) {
                out << r.buckets[k].minutes << " min  MAE " << r.buckets[k].mae << "  RMSE " << r.buckets[k].rmse << "  (HA RMSE "
                    << ha.buckets[k].rmse << ")\n";
            }
        }
        return exit_ok;
    });
}

/// prediction.csv: H rows of `horizon,node_0..node_{N-1}` in original units.
inline int cmd_predict(const CommandArgs& a, std::ostream& out, std::ostream& err) {
    return cmd::guarded(err, [&] {
        RunConfig rc = cmd::load_config(a);
        if (!a.t0) throw ConfigError("predict needs --t0");
        const Checkpoint ck = cmd::read_checkpoint_file(a.checkpoint);
        GacanModel m = cmd::checkpoint_model(ck, rc, a.checkpoint);
        rc.model = m.config;
        cmd::check_config(rc);
        cmd::LoadedData data = cmd::load_data(rc);
        if (data.series.nodes() != m.config.n_nodes) throw ConfigError("checkpoint and data disagree on the node count");
        const SpeedSeries clean = interpolate_missing(data.series);
        NormStats stats;
        if (auto st = cmd::norm_from(ck)) stats = *st;
        else {
            const SplitRanges sp = chronological_split(clean.length(), rc.data.ratios);
            stats = compute_norm_stats(clean.values, sp.train.begin, sp.train.end, rc.data.standardize);
        }
        const Tensor values = zero_mean(clean.values, stats);
        const WindowSpec spec = WindowSpec::from(m.config);
        const std::size_t t0 = *a.t0;
        const auto sample = extract_windows(values, t0, spec, false);
        if (!sample) {
            throw cmd::DataError("origin t0=" + std::to_string(t0) + " needs " + std::to_string(lookback_span(spec)) +
                                 " earlier slices inside a series of " + std::to_string(clean.length()));
        }
        const Tensor pred = denormalize(predict(m, data.op, sample->streams), stats);
        const auto dir = cmd::out_dir(a);
        auto os = cmd::open_out(dir / "prediction.csv");
        os << "# config_hash=" << config_hash(rc) << '\n' << "horizon";
        for (std::size_t i = 0; i < pred.dim(1); ++i) os << ",node_" << i;
        os << '\n';
        for (std::size_t h = 0; h < pred.dim(0); ++h) {
            os << h + 1;
            for (std::size_t i = 0; i < pred.dim(1); ++i) os << ',' << cmd::fmt(pred(h, i));
            os << '\n';
        }
        if (!a.quiet) out << "wrote " << pred.dim(0) << "-step forecast from t0=" << t0 << '\n';
        return exit_ok;
    });
}

/// Gradient check at one scope; exit 1 if any tensor exceeds its tolerance.
/// The model scope uses the checkpoint's config and parameters when given,
/// the toy config otherwise.
inline int cmd_gradcheck(const CommandArgs& a, std::ostream& out, std::ostream& err) {
    return cmd::guarded(err, [&] {
        RunConfig rc = cmd::load_config(a);
        const GradScope scope = parse_grad_scope(a.scope);
        GradSuiteOptions opt;
        opt.trials = a.trials;
        opt.seed = rc.model.seed;
        opt.corrupt = a.inject_fault;
        GradSuiteReport report;
        if (!a.checkpoint.empty() && scope != GradScope::primitives) {
            const Checkpoint ck = cmd::read_checkpoint_file(a.checkpoint);
            GacanModel m = cmd::checkpoint_model(ck, rc, a.checkpoint);
            report = scope == GradScope::model ? check_model(m.config, opt, &m.params) : check_block(m.config, opt);
        } else {
            report = run_grad_suite(scope, gradcheck_toy_config(), opt);
        }
        auto entries = report.entries;
        std::stable_sort(entries.begin(), entries.end(), [](const auto& x, const auto& y) { return x.worst > y.worst; });
        const auto dir = cmd::out_dir(a);
        auto os = cmd::open_out(dir / "gradcheck.csv");
        os << "# config_hash=" << config_hash(rc) << '\n' << "scope,name,checks,worst_rel_error,tolerance,pass\n";
        for (const auto& e : entries) {
            os << to_string(scope) << ',' << e.name << ',' << e.checks << ',' << cmd::fmt(e.worst) << ',' << cmd::fmt(report.tolerance) << ','
               << (e.pass ? "true" : "false") << '\n';
        }
        const bool ok = report.passed();
        out << "gradcheck " << to_string(scope) << ": " << (ok ? "PASS" : "FAIL") << "  worst " << report.worst() << "  tolerance "
            << report.tolerance << '\n';
        const std::size_t show = ok ? std::min<std::size_t>(entries.size(), 3) : std::min<std::size_t>(entries.size(), 10);
        for (std::size_t k = 0; k < show; ++k) {
            out << "  " << entries[k].name << "  " << entries[k].worst << (entries[k].pass ? "" : "  FAIL") << '\n';
        }
        return ok ? exit_ok : exit_check_failed;
    });
}

/// ablation.csv: `mode,horizon_minutes,mae,rmse`, one row per mode and bucket.
inline int cmd_ablate(const CommandArgs& a, std::ostream& out, std::ostream& err) {
    return cmd::guarded(err, [&] {
        RunConfig rc = cmd::load_config(a);
        if (a.modes) rc.modes = parse_modes(*a.modes);
        cmd::check_config(rc);
        cmd::LoadedData data = cmd::load_data(rc);
        std::function<void(char, const HistoryRow&)> progress;
        if (!a.quiet) progress = [&](char mode, const HistoryRow& r) { out << "mode " << mode << "  step " << r.step << "  val_rmse " << r.val_rmse << '\n'; };
        const auto rows = ablate(data.series, data.op, rc.model, rc.train, data_options(rc.data), rc.modes, cmd::buckets_of(rc), progress);
        const auto dir = cmd::out_dir(a);
        auto os = cmd::open_out(dir / "ablation.csv");
        os << "# config_hash=" << config_hash(rc) << '\n' << "mode,horizon_minutes,mae,rmse\n";
        for (const auto& row : rows)
            for (const auto& b : row.report.buckets) os << row.mode << ',' << b.minutes << ',' << cmd::fmt(b.mae) << ',' << cmd::fmt(b.rmse) << '\n';
        if (!a.quiet) {
            for (const auto& row : rows) {
                out << "mode " << row.mode << " (" << ablation_mask(row.mode).str() << "):";
                for (const auto& b : row.report.buckets) out << "  " << b.minutes << " min RMSE " << b.rmse;
                out << '\n';
            }
        }
        return exit_ok;
    });
}

/// Dispatches by subcommand name; unknown names are config errors.
inline int run_command(const std::string& name, const CommandArgs& a, std::ostream& out, std::ostream& err) {
    if (name == "synth") return cmd_synth(a, out, err);
    if (name == "preprocess") return cmd_preprocess(a, out, err);
    if (name == "train") return cmd_train(a, out, err);
    if (name == "eval") return cmd_eval(a, out, err);
    if (name == "predict") return cmd_predict(a, out, err);
    if (name == "gradcheck") return cmd_gradcheck(a, out, err);
    if (name == "ablate") return cmd_ablate(a, out, err);
    err << "unknown command '" << name << "'\n";
    return exit_config;
}

} // namespace gacan
