#pragma once

// Flat `key = value` run configuration covering the model, the trainer, the
// data files and the synthetic generator.

#include <filesystem>
#include <fstream>
#include <istream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gacan/data.hpp"
#include "gacan/init.hpp"
#include "gacan/keyvalue.hpp"
#include "gacan/model.hpp"
#include "gacan/trainer.hpp"

namespace gacan {

struct DataConfig {
    std::string speeds;    // CSV path; relative paths resolve against the config file
    std::string distances; // CSV path
    std::array<double, 3> ratios{0.7, 0.1, 0.2};
    bool standardize = false;
    double sigma2 = 10.0;
    double epsilon = 0.5;
    std::vector<std::size_t> buckets; // slices; empty selects 15/30/60 minutes
    std::size_t min_lookback = 0;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    DataConfig data;
    SynthConfig synth;
    std::string modes = "abcd";
    std::set<std::string> given; // keys set explicitly
};

/// Applies `seed` to the model, the trainer and the generator alike.
inline void set_seed(RunConfig& rc, std::uint64_t seed) {
    rc.model.seed = seed;
    rc.train.seed = seed;
    rc.synth.seed = seed;
}

/// Applies one setting. Throws ConfigError on unknown keys or bad values.
inline void set_run_key(RunConfig& rc, std::string_view key, std::string_view value) {
    using namespace kv;
    const auto v = trim(value);
    TrainConfig& t = rc.train;
    DataConfig& d = rc.data;
    SynthConfig& s = rc.synth;
    if (key == "seed") set_seed(rc, to_u64(key, v));
    else if (set_model_key(rc.model, key, v)) {
    } else if (key == "lr") t.lr = to_real(key, v);
    else if (key == "beta1") t.beta1 = to_real(key, v);
    else if (key == "beta2") t.beta2 = to_real(key, v);
    else if (key == "adam_eps") t.adam_eps = to_real(key, v);
    else if (key == "batch") t.batch = to_size(key, v);
    else if (key == "max_steps") t.max_steps = to_size(key, v);
    else if (key == "patience") t.patience = to_size(key, v);
    else if (key == "eval_every") t.eval_every = to_size(key, v);
    else if (key == "val_samples") t.val_samples = to_size(key, v);
    else if (key == "loss") {
        if (v == "rmse") t.loss = LossKind::rmse;
        else if (v == "mse") t.loss = LossKind::mse;
        else bad(key, v, "rmse or mse");
    } else if (key == "speeds") d.speeds = std::string(v);
    else if (key == "distances") d.distances = std::string(v);
    else if (key == "ratios") {
        const auto parts = split_view(v, ',');
        if (parts.size() != 3) bad(key, v, "three comma-separated fractions");
        for (std::size_t i = 0; i < 3; ++i) d.ratios[i] = to_real(key, parts[i]);
    } else if (key == "standardize") d.standardize = to_bool(key, v);
    else if (key == "sigma2") d.sigma2 = to_real(key, v);
    else if (key == "epsilon") d.epsilon = to_real(key, v);
    else if (key == "buckets") d.buckets = v.empty() ? std::vector<std::size_t>{} : to_size_list(key, v);
    else if (key == "min_lookback") d.min_lookback = to_size(key, v);
    else if (key == "modes") rc.modes = parse_modes(v);
    else if (key == "synth.nodes") s.nodes = to_size(key, v);
    else if (key == "synth.days") s.days = to_size(key, v);
    else if (key == "synth.minutes") s.minutes = to_size(key, v);
    else if (key == "synth.daily_amp") s.daily_amp = to_real(key, v);
    else if (key == "synth.weekly_amp") s.weekly_amp = to_real(key, v);
    else if (key == "synth.rush_amp") s.rush_amp = to_real(key, v);
    else if (key == "synth.noise_std") s.noise_std = to_real(key, v);
    else if (key == "synth.coupling") s.coupling = to_real(key, v);
    else if (key == "synth.missing_rate") s.missing_rate = to_real(key, v);
    else throw ConfigError("unknown config key '" + std::string(key) + "'");
    rc.given.insert(std::string(key));
}

/// Reads `key = value` lines; '#' starts a comment. Relative data paths are
/// resolved against `base_dir`.
inline RunConfig parse_run_config(std::istream& in, const std::filesystem::path& base_dir = {}) {
    RunConfig rc;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const auto body = kv::trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string_view::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
        const std::string key(kv::trim(body.substr(0, eq)));
        if (rc.given.count(key)) throw ConfigError("line " + std::to_string(lineno) + ": key '" + key + "' set twice");
        try {
            set_run_key(rc, key, body.substr(eq + 1));
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    for (std::string* p : {&rc.data.speeds, &rc.data.distances}) {
        if (!p->empty() && std::filesystem::path(*p).is_relative() && !base_dir.empty()) *p = (base_dir / *p).lexically_normal().string();
    }
    return rc;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file " + path);
    return parse_run_config(in, std::filesystem::path(path).parent_path());
}

/// Every effective setting in a fixed order (model defaults resolved).
inline std::vector<std::pair<std::string, std::string>> run_entries(const RunConfig& rc) {
    using kv::from_bool;
    auto e = model_entries(rc.model);
    const TrainConfig& t = rc.train;
    const DataConfig& d = rc.data;
    const SynthConfig& s = rc.synth;
    const std::vector<std::pair<std::string, std::string>> rest{
        {"lr", format_double(t.lr)},
        {"beta1", format_double(t.beta1)},
        {"beta2", format_double(t.beta2)},
        {"adam_eps", format_double(t.adam_eps)},
        {"batch", std::to_string(t.batch)},
        {"max_steps", std::to_string(t.max_steps)},
        {"patience", std::to_string(t.patience)},
        {"eval_every", std::to_string(t.eval_every)},
        {"val_samples", std::to_string(t.val_samples)},
        {"loss", to_string(t.loss)},
        {"speeds", d.speeds},
        {"distances", d.distances},
        {"ratios", format_double(d.ratios[0]) + "," + format_double(d.ratios[1]) + "," + format_double(d.ratios[2])},
        {"standardize", from_bool(d.standardize)},
        {"sigma2", format_double(d.sigma2)},
        {"epsilon", format_double(d.epsilon)},
        {"buckets", kv::join(d.buckets)},
        {"min_lookback", std::to_string(d.min_lookback)},
        {"modes", rc.modes},
    };
    e.insert(e.end(), rest.begin(), rest.end());
    for (const auto& [k, v] : synth_entries(s)) {
        if (k != "seed") e.emplace_back("synth." + k, v);
    }
    return e;
}

/// Canonical `key = value` text; parsing it reproduces the same entries.
inline std::string dump_run_config(const RunConfig& rc) {
    std::ostringstream os;
    for (const auto& [k, v] : run_entries(rc)) os << k << " = " << v << '\n';
    return os.str();
}

/// Hash of the canonical dump.
inline std::string config_hash(const RunConfig& rc) { return hex64(fnv1a64(dump_run_config(rc))); }

inline DataOptions data_options(const DataConfig& d) {
    DataOptions o;
    o.ratios = d.ratios;
    o.standardize = d.standardize;
    o.min_lookback = d.min_lookback;
    return o;
}

} // namespace gacan
