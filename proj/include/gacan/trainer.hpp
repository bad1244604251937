#pragma once

// Losses, metrics, Adam, the training loop, the historical-average baseline
// and the granularity ablation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "gacan/autodiff.hpp"
#include "gacan/data.hpp"
#include "gacan/graph.hpp"
#include "gacan/model.hpp"

namespace gacan {

// ---------------------------------------------------------------------------
// Losses and metrics
// ---------------------------------------------------------------------------

enum class LossKind { rmse, mse };

inline const char* to_string(LossKind k) { return k == LossKind::mse ? "mse" : "rmse"; }

namespace detail {
inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(what) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
    }
}
} // namespace detail

/// sqrt(mean((pred - truth)^2)). The gradient at a zero residual is taken as 0.
inline ad::Var rmse_loss(const ad::Var& pred, const ad::Var& truth) {
    gacan::detail::check_same_shape(pred.value(), truth.value(), "rmse_loss");
    const Tensor& p = pred.value();
    const Tensor& t = truth.value();
    const std::size_t n = p.size();
    Tensor diff(p.shape());
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        diff[i] = p[i] - t[i];
        ss += diff[i] * diff[i];
    }
    const double r = std::sqrt(ss / static_cast<double>(n));
    return ad::detail::same_tape(pred, truth).record(Tensor({}, std::vector<double>{r}), {pred, truth},
                                             [diff, r, n](const Tensor& g, std::span<Tensor* const> in) {
                                                 if (r == 0.0) return;
                                                 const double c = g.item() / (static_cast<double>(n) * r);
                                                 for (std::size_t i = 0; i < diff.size(); ++i) {
                                                     if (in[0]) (*in[0])[i] += c * diff[i];
                                                     if (in[1]) (*in[1])[i] -= c * diff[i];
                                                 }
                                             });
}

inline ad::Var mse_loss(const ad::Var& pred, const ad::Var& truth) {
    gacan::detail::check_same_shape(pred.value(), truth.value(), "mse_loss");
    return ad::mean(ad::square(ad::sub(pred, truth)));
}

inline ad::Var training_loss(LossKind k, const ad::Var& pred, const ad::Var& truth) {
    return k == LossKind::mse ? mse_loss(pred, truth) : rmse_loss(pred, truth);
}

inline double mae(const Tensor& pred, const Tensor& truth) {
    gacan::detail::check_same_shape(pred, truth, "mae");
    if (pred.empty()) throw ValidationError("mae of empty arrays");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - truth[i]);
    return s / static_cast<double>(pred.size());
}

inline double rmse(const Tensor& pred, const Tensor& truth) {
    gacan::detail::check_same_shape(pred, truth, "rmse");
    if (pred.empty()) throw ValidationError("rmse of empty arrays");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
    return std::sqrt(s / static_cast<double>(pred.size()));
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

struct TrainConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t batch = 8;
    std::size_t max_steps = 1000;
    std::size_t patience = 10;   // evaluations without improvement
    std::size_t eval_every = 50; // steps between validation passes
    std::size_t val_samples = 0; // 0: every validation origin, else an evenly spaced subset
    LossKind loss = LossKind::rmse;
    std::uint64_t seed = 0;

    bool operator==(const TrainConfig&) const = default;
};

inline void validate(const TrainConfig& c) {
    std::vector<std::string> bad;
    if (!(c.lr >= 0.0) || !std::isfinite(c.lr)) bad.push_back("lr (must be >= 0)");
    if (!(c.beta1 >= 0.0 && c.beta1 < 1.0)) bad.push_back("beta1 (must lie in [0,1))");
    if (!(c.beta2 >= 0.0 && c.beta2 < 1.0)) bad.push_back("beta2 (must lie in [0,1))");
    if (!(c.adam_eps > 0.0)) bad.push_back("adam_eps (must be > 0)");
    if (c.batch < 1) bad.push_back("batch (must be >= 1)");
    if (c.patience < 1) bad.push_back("patience (must be >= 1)");
    if (c.eval_every < 1) bad.push_back("eval_every (must be >= 1)");
    if (bad.empty()) return;
    std::string msg = "invalid train config:";
    for (const auto& b : bad) msg += " " + b + ";";
    msg.pop_back();
    throw ValidationError(msg);
}

/// Adam with bias-corrected moments. A step size of exactly 0 leaves the
/// parameters bit-identical.
class Adam {
public:
    Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}
    explicit Adam(const TrainConfig& c) : Adam(c.lr, c.beta1, c.beta2, c.adam_eps) {}

    void step(ParameterStore& store) {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (auto& [name, e] : store) {
            auto [it, fresh] = moments_.try_emplace(name);
            if (fresh) it->second = {Tensor(e.value.shape(), 0.0), Tensor(e.value.shape(), 0.0)};
            Tensor& m = it->second.first;
            Tensor& v = it->second.second;
            for (std::size_t i = 0; i < e.value.size(); ++i) {
                const double g = e.grad[i];
                m[i] = b1_ * m[i] + (1.0 - b1_) * g;
                v[i] = b2_ * v[i] + (1.0 - b2_) * g * g;
                if (lr_ != 0.0) e.value[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
            }
        }
    }

    std::size_t steps() const noexcept { return t_; }

private:
    double lr_, b1_, b2_, eps_;
    std::size_t t_ = 0;
    std::map<std::string, std::pair<Tensor, Tensor>> moments_;
};

// ---------------------------------------------------------------------------
// Forecasters and evaluation
// ---------------------------------------------------------------------------

/// Maps an origin t0 to an H x N forecast in original speed units.
using Forecaster = std::function<Tensor(std::size_t t0)>;

/// Mean of slices t0-8 .. t0 for every horizon step.
inline Tensor ha_baseline(const Tensor& values, std::size_t t0, std::size_t horizon) {
    constexpr std::size_t window = 9;
    if (values.rank() != 2) throw DimensionError("ha_baseline expects a T x N series");
    if (t0 + 1 < window) {
        throw ValidationError("historical average needs " + std::to_string(window) + " slices up to t0, origin " +
                              std::to_string(t0) + " has " + std::to_string(t0 + 1));
    }
    if (t0 >= values.dim(0)) throw ValidationError("origin " + std::to_string(t0) + " lies past the series");
    const std::size_t n = values.dim(1);
    Tensor out({horizon, n});
    const std::size_t first = t0 + 1 - window;
    for (std::size_t i = 0; i < n; ++i) {
        // Offsets from the first slice keep a constant window exact.
        double s = 0.0;
        for (std::size_t k = first + 1; k <= t0; ++k) s += values(k, i) - values(first, i);
        const double mean = values(first, i) + s / static_cast<double>(window);
        for (std::size_t h = 0; h < horizon; ++h) out(h, i) = mean;
    }
    return out;
}

inline Forecaster ha_forecaster(const Dataset& d) {
    return [&d](std::size_t t0) { return ha_baseline(d.series.values, t0, d.spec.horizon); };
}

/// Wraps a model; the model must outlive the forecaster.
inline Forecaster model_forecaster(GacanModel& m, const SpectralOperator& op, const Dataset& d) {
    return [&m, &op, &d](std::size_t t0) { return denormalize(predict(m, op, d.sample(t0).streams), d.stats); };
}

/// Ground truth in original units for slices t0+1 .. t0+H.
inline Tensor target_of(const Dataset& d, std::size_t t0) {
    const std::size_t h = d.spec.horizon, n = d.series.nodes();
    if (t0 + h >= d.series.length()) throw ValidationError("origin " + std::to_string(t0) + " has no full target");
    Tensor out({h, n});
    for (std::size_t j = 0; j < h; ++j)
        for (std::size_t i = 0; i < n; ++i) out(j, i) = d.series.values(t0 + 1 + j, i);
    return out;
}

struct BucketMetrics {
    std::size_t steps = 0;   // horizon step h (1-based)
    std::size_t minutes = 0; // h * p
    double mae = 0.0;
    double rmse = 0.0;
};

struct MetricsReport {
    std::vector<BucketMetrics> buckets;
    std::size_t samples = 0;
    std::vector<std::pair<std::string, std::string>> meta;

    const BucketMetrics& at_minutes(std::size_t minutes) const {
        for (const auto& b : buckets)
            if (b.minutes == minutes) return b;
        throw ValidationError("report has no " + std::to_string(minutes) + "-minute bucket");
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["horizon_minutes"] = nlohmann::ordered_json::array();
        j["mae"] = nlohmann::ordered_json::array();
        j["rmse"] = nlohmann::ordered_json::array();
        for (const auto& b : buckets) {
            j["horizon_minutes"].push_back(b.minutes);
            j["mae"].push_back(b.mae);
            j["rmse"].push_back(b.rmse);
        }
        nlohmann::ordered_json m = nlohmann::ordered_json::object();
        m["samples"] = samples;
        for (const auto& [k, v] : meta) m[k] = v;
        j["meta"] = m;
        return j;
    }
};

/// Default buckets: the 15, 30 and 60 minute steps that fit in the horizon,
/// or the last step if none do.
inline std::vector<std::size_t> default_buckets(std::size_t horizon, std::size_t minutes) {
    std::vector<std::size_t> out;
    for (std::size_t target : {15u, 30u, 60u}) {
        if (target % minutes == 0 && target / minutes <= horizon) out.push_back(target / minutes);
    }
    if (out.empty()) out.push_back(horizon);
    return out;
}

/// Called once per evaluated origin with the forecast and truth (original units).
using PredictionSink = std::function<void(std::size_t t0, const Tensor& pred, const Tensor& truth)>;

/// Step-h MAE and RMSE per bucket over every node of every origin.
inline MetricsReport evaluate(const Forecaster& f, const Dataset& d, const std::vector<std::size_t>& origins,
                              const std::vector<std::size_t>& buckets, std::vector<std::pair<std::string, std::string>> meta = {},
                              const PredictionSink& sink = {}) {
    if (origins.empty()) throw ValidationError("evaluation split has no eligible samples");
    if (buckets.empty()) throw ValidationError("no horizon buckets requested");
    const std::size_t horizon = d.spec.horizon, n = d.series.nodes();
    for (auto b : buckets) {
        if (b < 1 || b > horizon) {
            throw ValidationError("horizon bucket " + std::to_string(b) + " lies outside 1.." + std::to_string(horizon));
        }
    }
    std::vector<double> abs_sum(buckets.size(), 0.0), sq_sum(buckets.size(), 0.0);
    for (std::size_t t0 : origins) {
        const Tensor pred = f(t0);
        const Tensor truth = target_of(d, t0);
        gacan::detail::check_same_shape(pred, truth, "forecast");
        for (std::size_t k = 0; k < buckets.size(); ++k) {
            const std::size_t h = buckets[k] - 1;
            for (std::size_t i = 0; i < n; ++i) {
                const double e = pred(h, i) - truth(h, i);
                abs_sum[k] += std::abs(e);
                sq_sum[k] += e * e;
            }
        }
        if (sink) sink(t0, pred, truth);
    }
    MetricsReport r;
    r.samples = origins.size();
    r.meta = std::move(meta);
    const double count = static_cast<double>(origins.size() * n);
    for (std::size_t k = 0; k < buckets.size(); ++k) {
        r.buckets.push_back({buckets[k], buckets[k] * d.minutes, abs_sum[k] / count, std::sqrt(sq_sum[k] / count)});
    }
    return r;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct HistoryRow {
    std::size_t step = 0;
    double train_loss = 0.0; // mean batch loss since the previous row, normalized units
    double val_rmse = 0.0;   // original units
};

struct TrainResult {
    GacanModel model; // best-validation parameters
    std::vector<HistoryRow> history;
    std::size_t best_step = 0;
    double best_val_rmse = 0.0;
    std::size_t steps_run = 0;
    bool stopped_early = false;
};

/// Loss went non-finite. Carries the parameters of the last finite step.
class TrainingError : public NumericError {
public:
    TrainingError(const std::string& what, std::size_t step, GacanModel last_good)
        : NumericError(what), step_(step), last_good_(std::move(last_good)) {}
    std::size_t step() const noexcept { return step_; }
    const GacanModel& last_good() const noexcept { return last_good_; }

private:
    std::size_t step_;
    GacanModel last_good_;
};

/// Evenly spaced subset of at most `limit` origins (all when limit is 0).
inline std::vector<std::size_t> spaced_subset(const std::vector<std::size_t>& origins, std::size_t limit) {
    if (limit == 0 || origins.size() <= limit) return origins;
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < limit; ++k) out.push_back(origins[k * origins.size() / limit]);
    return out;
}

/// RMSE over every step and node, original units.
inline double validation_rmse(GacanModel& m, const SpectralOperator& op, const Dataset& d, const std::vector<std::size_t>& origins) {
    double sq = 0.0;
    std::size_t count = 0;
    for (std::size_t t0 : origins) {
        const Tensor pred = denormalize(predict(m, op, d.sample(t0).streams), d.stats);
        const Tensor truth = target_of(d, t0);
        for (std::size_t i = 0; i < pred.size(); ++i) sq += (pred[i] - truth[i]) * (pred[i] - truth[i]);
        count += pred.size();
    }
    return std::sqrt(sq / static_cast<double>(count));
}

/// Mean training loss of one sample batch; leaves the averaged gradient in
/// the model's store.
inline double batch_gradient(GacanModel& m, const SpectralOperator& op, const Dataset& d, const std::vector<std::size_t>& batch,
                             LossKind loss_kind, std::map<std::string, Tensor>& acc) {
    for (auto& [name, e] : m.params) {
        auto& a = acc[name];
        if (a.shape() != e.value.shape()) a = Tensor(e.value.shape(), 0.0);
        else a.fill(0.0);
    }
    double total = 0.0;
    for (std::size_t t0 : batch) {
        const WindowedSample s = d.sample(t0);
        ad::Tape tape;
        ad::Var pred = model_forward(tape, m, op, s.streams);
        ad::Var loss = training_loss(loss_kind, pred, tape.constant(s.target));
        tape.backward(loss);
        total += loss.value().item();
        for (auto& [name, e] : m.params) {
            Tensor& a = acc[name];
            for (std::size_t i = 0; i < a.size(); ++i) a[i] += e.grad[i];
        }
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (auto& [name, e] : m.params) {
        const Tensor& a = acc[name];
        for (std::size_t i = 0; i < a.size(); ++i) e.grad[i] = a[i] * inv;
    }
    return total * inv;
}

using ProgressFn = std::function<void(const HistoryRow&)>;

/// Mini-batch Adam over the training origins in a seeded shuffle order, with
/// validation every `eval_every` steps (and before the first step) and early
/// stopping after `patience` evaluations without a new best.
inline TrainResult train(GacanModel model, const SpectralOperator& op, const Dataset& d, const TrainConfig& cfg,
                         const ProgressFn& progress = {}) {
    validate(cfg);
    if (d.train.empty()) throw ValidationError("training split is empty");
    if (d.val.empty()) throw ValidationError("validation split is empty");
    const std::vector<std::size_t> val = spaced_subset(d.val, cfg.val_samples);

    TrainResult r;
    Adam adam(cfg);
    std::mt19937_64 rng(cfg.seed);
    std::vector<std::size_t> order = d.train;
    std::size_t cursor = order.size(); // forces a shuffle before the first batch
    std::map<std::string, Tensor> acc;
    GacanModel last_good = model;

    auto record = [&](std::size_t step, double train_loss) {
        HistoryRow row{step, train_loss, validation_rmse(model, op, d, val)};
        r.history.push_back(row);
        if (progress) progress(row);
        if (r.history.size() == 1 || row.val_rmse < r.best_val_rmse) {
            r.best_val_rmse = row.val_rmse;
            r.best_step = step;
            r.model = model;
            return true;
        }
        return false;
    };

    std::size_t stale = 0;
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    try {
        record(0, std::numeric_limits<double>::quiet_NaN());
    } catch (const NumericError& e) {
        throw TrainingError(std::string("initial model is not finite: ") + e.what(), 0, last_good);
    }
    for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
        std::vector<std::size_t> batch;
        while (batch.size() < cfg.batch) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), rng);
                cursor = 0;
            }
            batch.push_back(order[cursor++]);
        }
        double loss = 0.0;
        try {
            loss = batch_gradient(model, op, d, batch, cfg.loss, acc);
        } catch (const NumericError& e) {
            throw TrainingError("training diverged at step " + std::to_string(step) + ": " + e.what(), step - 1, last_good);
        }
        if (!std::isfinite(loss)) {
            throw TrainingError("training loss is not finite at step " + std::to_string(step), step - 1, last_good);
        }
        last_good = model;
        adam.step(model.params);
        r.steps_run = step;
        loss_sum += loss;
        ++loss_count;
        if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
            bool improved = false;
            try {
                improved = record(step, loss_sum / static_cast<double>(loss_count));
            } catch (const NumericError& e) {
                throw TrainingError("validation diverged at step " + std::to_string(step) + ": " + e.what(), step - 1, last_good);
            }
            loss_sum = 0.0;
            loss_count = 0;
            stale = improved ? 0 : stale + 1;
            if (stale >= cfg.patience) {
                r.stopped_early = true;
                break;
            }
        }
    }
    return r;
}

/// Mean training loss over the given origins, normalized units.
inline double mean_training_loss(GacanModel& m, const SpectralOperator& op, const Dataset& d, const std::vector<std::size_t>& origins,
                                 LossKind kind) {
    double s = 0.0;
    for (std::size_t t0 : origins) {
        const WindowedSample smp = d.sample(t0);
        ad::Tape tape;
        s += training_loss(kind, model_forward(tape, m, op, smp.streams), tape.constant(smp.target)).value().item();
    }
    return s / static_cast<double>(origins.size());
}

// ---------------------------------------------------------------------------
// Granularity ablation
// ---------------------------------------------------------------------------

/// a = {m}, b = {m,h}, c = {m,h,d}, d = {m,h,d,w}.
inline GranularityMask ablation_mask(char mode) {
    using G = Granularity;
    switch (mode) {
    case 'a': return GranularityMask{G::minute};
    case 'b': return GranularityMask{G::minute, G::hour};
    case 'c': return GranularityMask{G::minute, G::hour, G::day};
    case 'd': return GranularityMask{G::minute, G::hour, G::day, G::week};
    default: break;
    }
    throw ConfigError(std::string("unknown ablation mode '") + mode + "' (expected a, b, c or d)");
}

inline std::string parse_modes(std::string_view text) {
    std::string out;
    for (char ch : text) {
        if (ch == ',' || ch == ' ') continue;
        ablation_mask(ch);
        if (out.find(ch) != std::string::npos) throw ConfigError(std::string("ablation mode '") + ch + "' listed twice");
        out += ch;
    }
    if (out.empty()) throw ConfigError("no ablation modes given");
    return out;
}

/// The config for one ablation mode: the base config with its history and
/// per-granularity counts pinned, and only the mask changed.
inline ModelConfig ablation_config(const ModelConfig& base, char mode) {
    ModelConfig c = base;
    c.history = effective_history(base);
    for (auto g : all_granularities) count_field(c, g) = granularity_count(base, g);
    c.mask = ablation_mask(mode);
    return c;
}

struct AblationRow {
    char mode = 'a';
    MetricsReport report;
    TrainResult result;
};

/// Trains and tests one model per mode. Every mode uses the same seeds and the
/// same train, validation and test origins (those eligible for the widest
/// mask), so the comparison isolates the granularities.
inline std::vector<AblationRow> ablate(const SpeedSeries& raw, const SpectralOperator& op, const ModelConfig& base,
                                       const TrainConfig& tc, DataOptions opt, std::string_view modes,
                                       std::optional<std::vector<std::size_t>> buckets = std::nullopt,
                                       const std::function<void(char, const HistoryRow&)>& progress = {}) {
    const std::string list = parse_modes(modes);
    std::size_t lookback = opt.min_lookback;
    for (char mode : list) {
        const ModelConfig c = ablation_config(base, mode);
        validate(c);
        lookback = std::max(lookback, lookback_span(WindowSpec::from(c)));
    }
    opt.min_lookback = lookback;
    std::vector<AblationRow> rows;
    for (char mode : list) {
        const ModelConfig c = ablation_config(base, mode);
        const Dataset d = prepare_dataset(raw, c, opt);
        ProgressFn cb;
        if (progress) cb = [&](const HistoryRow& row) { progress(mode, row); };
        AblationRow row;
        row.mode = mode;
        row.result = train(init_model(c), op, d, tc, cb);
        const auto b = buckets ? *buckets : default_buckets(c.horizon, c.minutes);
        row.report = evaluate(model_forecaster(row.result.model, op, d), d, d.test, b,
                              {{"mode", std::string(1, mode)}, {"mask", c.mask.str()}});
        rows.push_back(std::move(row));
    }
    return rows;
}

} // namespace gacan
