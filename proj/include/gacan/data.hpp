#pragma once

// Speed series ingestion, cleaning, normalization, multi-granularity
// windowing, chronological splits and the synthetic traffic generator.

#include <algorithm>
#include <array>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "gacan/error.hpp"
#include "gacan/graph.hpp"
#include "gacan/keyvalue.hpp"
#include "gacan/model.hpp"
#include "gacan/parameters.hpp"
#include "gacan/sample.hpp"
#include "gacan/tensor.hpp"

namespace gacan {

/// T x N speeds on consecutive slices. Missing cells hold 0 and are flagged
/// in `missing` (row-major, T x N).
struct SpeedSeries {
    std::vector<std::int64_t> timestamps; // slice indices, consecutive after loading
    Tensor values;
    std::vector<char> missing;

    std::size_t length() const { return values.dim(0); }
    std::size_t nodes() const { return values.dim(1); }
    bool is_missing(std::size_t t, std::size_t i) const { return missing[t * nodes() + i] != 0; }
    std::size_t missing_count() const { return static_cast<std::size_t>(std::count(missing.begin(), missing.end(), 1)); }
};

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

namespace detail {

inline bool is_integer_text(std::string_view s) {
    if (s.empty()) return false;
    std::size_t i = s[0] == '-' ? 1 : 0;
    if (i == s.size()) return false;
    for (; i < s.size(); ++i)
        if (s[i] < '0' || s[i] > '9') return false;
    return true;
}

/// Minutes since 1970-01-01T00:00 for "YYYY-MM-DDTHH:MM[:SS][Z]" (a space
/// may replace the T). Seconds must be zero.
inline std::optional<std::int64_t> iso_minutes(std::string_view s) {
    if (!s.empty() && s.back() == 'Z') s.remove_suffix(1);
    if (s.size() != 16 && s.size() != 19) return std::nullopt;
    auto num = [&](std::size_t pos, std::size_t len) -> std::optional<int> {
        int v = 0;
        for (std::size_t i = pos; i < pos + len; ++i) {
            if (s[i] < '0' || s[i] > '9') return std::nullopt;
            v = v * 10 + (s[i] - '0');
        }
        return v;
    };
    if (s[4] != '-' || s[7] != '-' || (s[10] != 'T' && s[10] != ' ') || s[13] != ':') return std::nullopt;
    auto y = num(0, 4), mo = num(5, 2), d = num(8, 2), h = num(11, 2), mi = num(14, 2);
    if (!y || !mo || !d || !h || !mi || *h > 23 || *mi > 59) return std::nullopt;
    if (s.size() == 19) {
        auto sec = num(17, 2);
        if (s[16] != ':' || !sec || *sec != 0) return std::nullopt;
    }
    using namespace std::chrono;
    const year_month_day ymd{year{*y}, month{static_cast<unsigned>(*mo)}, day{static_cast<unsigned>(*d)}};
    if (!ymd.ok()) return std::nullopt;
    const auto days = sys_days{ymd}.time_since_epoch().count();
    return static_cast<std::int64_t>(days) * 1440 + *h * 60 + *mi;
}

} // namespace detail

/// Parses `timestamp,node_0,...,node_{N-1}`. Timestamps are all integer slice
/// indices or all ISO-8601 times (converted with `minutes` per slice). Empty
/// fields are missing; skipped slices become all-missing rows. '#' lines are
/// comments.
inline SpeedSeries read_speeds_csv(std::istream& in, std::size_t minutes = 5) {
    if (minutes == 0) throw ValidationError("slice length must be positive");
    std::string line;
    std::size_t lineno = 0;
    auto next = [&]() -> bool {
        while (std::getline(in, line)) {
            ++lineno;
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty() || line.front() == '#') continue;
            return true;
        }
        return false;
    };
    if (!next()) throw ParseError("empty speeds file", lineno + 1);
    const auto header = split_view(line, ',');
    if (header.size() < 2 || header[0] != "timestamp") throw ParseError("expected header 'timestamp,node_0,...'", lineno);
    const std::size_t n = header.size() - 1;
    for (std::size_t i = 0; i < n; ++i) {
        if (header[i + 1] != "node_" + std::to_string(i)) {
            throw ParseError("expected column 'node_" + std::to_string(i) + "', got '" + std::string(header[i + 1]) + "'", lineno);
        }
    }

    struct Row {
        std::int64_t stamp;
        std::vector<double> v;
        std::vector<char> miss;
    };
    std::vector<Row> rows;
    std::optional<bool> integer_stamps;
    while (next()) {
        const auto f = split_view(line, ',');
        if (f.size() != n + 1) {
            throw ParseError("expected " + std::to_string(n + 1) + " fields, got " + std::to_string(f.size()), lineno);
        }
        const bool integer = detail::is_integer_text(f[0]);
        if (!integer_stamps) integer_stamps = integer;
        if (*integer_stamps != integer) throw ParseError("timestamps mix integer and ISO-8601 forms", lineno);
        Row r;
        if (integer) {
            const auto res = std::from_chars(f[0].data(), f[0].data() + f[0].size(), r.stamp);
            if (res.ec != std::errc{}) throw ParseError("timestamp out of range", lineno);
        } else {
            const auto m = detail::iso_minutes(f[0]);
            if (!m) throw ParseError("bad timestamp '" + std::string(f[0]) + "'", lineno);
            if (*m % static_cast<std::int64_t>(minutes) != 0) {
                throw ParseError("timestamp '" + std::string(f[0]) + "' is not on a " + std::to_string(minutes) + "-minute grid", lineno);
            }
            r.stamp = *m / static_cast<std::int64_t>(minutes);
        }
        for (std::size_t i = 0; i < n; ++i) {
            const auto cell = kv::trim(f[i + 1]);
            if (cell.empty()) {
                r.v.push_back(0.0);
                r.miss.push_back(1);
                continue;
            }
            double v = 0;
            try {
                v = parse_double(cell);
            } catch (const ValidationError&) {
                throw ParseError("bad speed '" + std::string(cell) + "' for node_" + std::to_string(i), lineno);
            }
            if (!std::isfinite(v)) throw ParseError("non-finite speed for node_" + std::to_string(i), lineno);
            r.v.push_back(v);
            r.miss.push_back(0);
        }
        if (!rows.empty() && r.stamp <= rows.back().stamp) {
            throw ValidationError(std::string(r.stamp == rows.back().stamp ? "duplicate" : "decreasing") +
                                  " timestamp on line " + std::to_string(lineno));
        }
        rows.push_back(std::move(r));
    }
    if (rows.empty()) throw ValidationError("speeds file has no data rows");

    const auto t = static_cast<std::size_t>(rows.back().stamp - rows.front().stamp + 1);
    SpeedSeries s;
    s.values = Tensor({t, n}, 0.0);
    s.missing.assign(t * n, 1);
    for (std::size_t k = 0; k < t; ++k) s.timestamps.push_back(rows.front().stamp + static_cast<std::int64_t>(k));
    for (const auto& r : rows) {
        const auto k = static_cast<std::size_t>(r.stamp - rows.front().stamp);
        for (std::size_t i = 0; i < n; ++i) {
            s.values(k, i) = r.v[i];
            s.missing[k * n + i] = r.miss[i];
        }
    }
    return s;
}

inline SpeedSeries load_speeds(const std::string& path, std::size_t minutes = 5) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open speeds file '" + path + "'");
    return read_speeds_csv(in, minutes);
}

// ---------------------------------------------------------------------------
// Cleaning and normalization
// ---------------------------------------------------------------------------

/// Linear interpolation between the nearest present neighbours in time;
/// leading and trailing gaps take the nearest present value.
inline SpeedSeries interpolate_missing(SpeedSeries s) {
    const std::size_t t = s.length(), n = s.nodes();
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::size_t> present;
        for (std::size_t k = 0; k < t; ++k)
            if (!s.is_missing(k, i)) present.push_back(k);
        if (present.empty()) throw ValidationError("node_" + std::to_string(i) + " has no observed values");
        for (std::size_t k = 0; k < present.front(); ++k) s.values(k, i) = s.values(present.front(), i);
        for (std::size_t k = present.back() + 1; k < t; ++k) s.values(k, i) = s.values(present.back(), i);
        for (std::size_t j = 0; j + 1 < present.size(); ++j) {
            const std::size_t a = present[j], b = present[j + 1];
            const double va = s.values(a, i), vb = s.values(b, i);
            for (std::size_t k = a + 1; k < b; ++k) {
                const double w = static_cast<double>(k - a) / static_cast<double>(b - a);
                s.values(k, i) = va + w * (vb - va);
            }
        }
    }
    std::fill(s.missing.begin(), s.missing.end(), 0);
    return s;
}

/// Per-node statistics from the training range. std is all ones unless
/// standardizing.
struct NormStats {
    std::vector<double> mean;
    std::vector<double> std;
    bool standardize = false;
};

inline NormStats compute_norm_stats(const Tensor& values, std::size_t begin, std::size_t end, bool standardize) {
    if (values.rank() != 2) throw DimensionError("expected a T x N series");
    if (begin >= end || end > values.dim(0)) throw ValidationError("empty or out-of-range statistics window");
    const std::size_t n = values.dim(1);
    const double len = static_cast<double>(end - begin);
    NormStats st;
    st.standardize = standardize;
    st.mean.assign(n, 0.0);
    st.std.assign(n, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        double m = 0;
        for (std::size_t k = begin; k < end; ++k) m += values(k, i);
        m /= len;
        st.mean[i] = m;
        if (standardize) {
            double v = 0;
            for (std::size_t k = begin; k < end; ++k) v += (values(k, i) - m) * (values(k, i) - m);
            const double sd = std::sqrt(v / len);
            if (!(sd > 0.0)) throw ValidationError("node_" + std::to_string(i) + " is constant in the training range; cannot standardize");
            st.std[i] = sd;
        }
    }
    return st;
}

/// (x - mean_i) / std_i over the last axis (nodes) of any ... x N tensor.
inline Tensor zero_mean(const Tensor& x, const NormStats& st) {
    const std::size_t n = x.shape().back();
    if (n != st.mean.size()) throw DimensionError("normalization statistics cover " + std::to_string(st.mean.size()) + " nodes, data has " + std::to_string(n));
    Tensor y = x;
    for (std::size_t k = 0; k < y.size(); ++k) y[k] = (y[k] - st.mean[k % n]) / st.std[k % n];
    return y;
}

inline Tensor denormalize(const Tensor& x, const NormStats& st) {
    const std::size_t n = x.shape().back();
    if (n != st.mean.size()) throw DimensionError("normalization statistics cover " + std::to_string(st.mean.size()) + " nodes, data has " + std::to_string(n));
    Tensor y = x;
    for (std::size_t k = 0; k < y.size(); ++k) y[k] = y[k] * st.std[k % n] + st.mean[k % n];
    return y;
}

inline SpeedSeries zero_mean(SpeedSeries s, const NormStats& st) {
    s.values = zero_mean(s.values, st);
    return s;
}

inline std::string join_doubles(const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_double(v[i]);
    return s;
}

inline std::vector<double> parse_doubles(std::string_view text) {
    std::vector<double> v;
    for (auto part : split_view(text, ',')) v.push_back(parse_double(part));
    return v;
}

// ---------------------------------------------------------------------------
// Windowing
// ---------------------------------------------------------------------------

/// Everything extract_windows needs, derived from a model config.
struct WindowSpec {
    std::size_t horizon = 1;
    GranularityMask mask;
    WindowMode mode = WindowMode::block;
    std::array<std::size_t, 4> count{};  // t per granularity
    std::array<std::size_t, 4> stride{}; // s per granularity (1 for m)

    static WindowSpec from(const ModelConfig& c) {
        WindowSpec w;
        w.horizon = c.horizon;
        w.mask = c.mask;
        w.mode = c.window_mode;
        const Strides s = strides_of(c);
        for (auto g : all_granularities) {
            w.count[static_cast<std::size_t>(g)] = granularity_count(c, g);
            w.stride[static_cast<std::size_t>(g)] = s.of(g);
        }
        return w;
    }
};

/// Slice indices feeding one granularity's stream: positions x slices-per-position.
/// Indices may be negative (insufficient history).
inline std::vector<std::vector<std::int64_t>> window_indices(std::int64_t t0, const WindowSpec& w, Granularity g) {
    const auto gi = static_cast<std::size_t>(g);
    const auto t = static_cast<std::int64_t>(w.count[gi]);
    const auto s = static_cast<std::int64_t>(w.stride[gi]);
    const auto h = static_cast<std::int64_t>(w.horizon);
    std::vector<std::vector<std::int64_t>> out;
    if (g == Granularity::minute) {
        for (std::int64_t k = t - 1; k >= 0; --k) out.push_back({t0 - k});
    } else if (w.mode == WindowMode::block) {
        for (std::int64_t b = t; b >= 1; --b) {
            std::vector<std::int64_t> block;
            for (std::int64_t j = 1; j <= h; ++j) block.push_back(t0 - b * s + j);
            out.push_back(std::move(block));
        }
    } else {
        for (std::int64_t k = t; k >= 0; --k) out.push_back({t0 - k * s});
    }
    return out;
}

/// Inputs and H-step target for origin t0 (0-based), or nullopt when the
/// history or the target runs off the series. Without `with_target` only the
/// inputs are needed and the target is left empty.
inline std::optional<WindowedSample> extract_windows(const Tensor& values, std::size_t t0, const WindowSpec& w,
                                                     bool with_target = true) {
    if (values.rank() != 2) throw DimensionError("expected a T x N series");
    const std::size_t len = values.dim(0), n = values.dim(1);
    if (t0 >= len || (with_target && t0 + w.horizon >= len)) return std::nullopt;
    WindowedSample out;
    out.t0 = t0;
    for (auto g : all_granularities) {
        if (!w.mask.has(g)) continue;
        const auto idx = window_indices(static_cast<std::int64_t>(t0), w, g);
        for (const auto& pos : idx)
            for (auto k : pos)
                if (k < 0) return std::nullopt;
        const std::size_t c = idx.front().size();
        Tensor x({idx.size(), n, c});
        for (std::size_t p = 0; p < idx.size(); ++p)
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j) x(p, i, j) = values(static_cast<std::size_t>(idx[p][j]), i);
        out.streams[static_cast<std::size_t>(g)] = std::move(x);
    }
    if (!with_target) return out;
    out.target = Tensor({w.horizon, n});
    for (std::size_t h = 0; h < w.horizon; ++h)
        for (std::size_t i = 0; i < n; ++i) out.target(h, i) = values(t0 + 1 + h, i);
    return out;
}

/// Oldest input slice a sample at t0 reads, relative to t0 (t0 - earliest).
inline std::size_t lookback_span(const WindowSpec& w) {
    std::int64_t lo = 0;
    for (auto g : all_granularities) {
        if (!w.mask.has(g)) continue;
        for (const auto& pos : window_indices(0, w, g))
            for (auto k : pos) lo = std::min(lo, k);
    }
    return static_cast<std::size_t>(-lo);
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SliceRange {
    std::size_t begin = 0;
    std::size_t end = 0; // exclusive
    std::size_t size() const { return end - begin; }
    bool contains(std::size_t k) const { return k >= begin && k < end; }
};

struct SplitRanges {
    SliceRange train, val, test;
};

/// Contiguous train / validation / test ranges with boundaries at
/// floor(r_train T) and floor((r_train + r_val) T).
inline SplitRanges chronological_split(std::size_t length, std::array<double, 3> ratios = {0.7, 0.1, 0.2}) {
    for (double r : ratios)
        if (!(r > 0.0)) throw ValidationError("split ratios must be positive");
    if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw ValidationError("split ratios must sum to 1");
    const auto len = static_cast<double>(length);
    const auto a = static_cast<std::size_t>(std::floor(ratios[0] * len + 1e-9));
    const auto b = static_cast<std::size_t>(std::floor((ratios[0] + ratios[1]) * len + 1e-9));
    return {{0, a}, {a, b}, {b, length}};
}

/// Origins t0 whose recent window and target both lie inside `range` and
/// whose full look-back stays inside the series. Periodic look-back may read
/// earlier ranges (observed history), never later ones.
inline std::vector<std::size_t> eligible_origins(const SliceRange& range, const WindowSpec& w, std::size_t min_lookback = 0) {
    const std::size_t recent = w.mask.has(Granularity::minute) ? w.count[0] : 1;
    const std::size_t back = std::max(lookback_span(w), min_lookback);
    std::vector<std::size_t> out;
    for (std::size_t t0 = range.begin; t0 < range.end; ++t0) {
        if (t0 + 1 < range.begin + recent) continue;
        if (t0 < back) continue;
        if (t0 + w.horizon >= range.end) continue;
        out.push_back(t0);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Prepared dataset
// ---------------------------------------------------------------------------

struct DataOptions {
    std::array<double, 3> ratios{0.7, 0.1, 0.2};
    bool standardize = false;
    std::size_t min_lookback = 0; // widen to share origins across configs
};

struct Dataset {
    SpeedSeries series; // cleaned, original units
    Tensor values;      // normalized T x N
    NormStats stats;
    SplitRanges split;
    WindowSpec spec;
    std::size_t minutes = 5; // p
    std::vector<std::size_t> train, val, test; // eligible origins

    WindowedSample sample(std::size_t t0) const {
        auto s = extract_windows(values, t0, spec);
        if (!s) throw ValidationError("origin " + std::to_string(t0) + " lacks history or target");
        return std::move(*s);
    }
};

/// Interpolates, splits, normalizes with training statistics and lists the
/// eligible origins of each split.
inline Dataset prepare_dataset(const SpeedSeries& raw, const ModelConfig& model, const DataOptions& opt = {}) {
    if (raw.nodes() != model.n_nodes) {
        throw ValidationError("series has " + std::to_string(raw.nodes()) + " nodes, config expects " + std::to_string(model.n_nodes));
    }
    Dataset d;
    d.series = interpolate_missing(raw);
    d.split = chronological_split(d.series.length(), opt.ratios);
    d.stats = compute_norm_stats(d.series.values, d.split.train.begin, d.split.train.end, opt.standardize);
    d.values = zero_mean(d.series.values, d.stats);
    d.spec = WindowSpec::from(model);
    d.minutes = model.minutes;
    d.train = eligible_origins(d.split.train, d.spec, opt.min_lookback);
    d.val = eligible_origins(d.split.val, d.spec, opt.min_lookback);
    d.test = eligible_origins(d.split.test, d.spec, opt.min_lookback);
    const std::size_t need = std::max(lookback_span(d.spec), opt.min_lookback);
    for (auto [name, list] : {std::pair{"train", &d.train}, std::pair{"validation", &d.val}, std::pair{"test", &d.test}}) {
        if (list->empty()) {
            throw ValidationError(std::string(name) + " split has no eligible samples (series has " +
                                  std::to_string(d.series.length()) + " slices, each sample needs " + std::to_string(need) +
                                  " slices of look-back and " + std::to_string(model.horizon) + " of target)");
        }
    }
    return d;
}

// ---------------------------------------------------------------------------
// Synthetic traffic
// ---------------------------------------------------------------------------

struct SynthConfig {
    std::size_t nodes = 8;
    std::size_t days = 21;
    std::size_t minutes = 5;
    std::uint64_t seed = 0;
    double daily_amp = 10.0;
    double weekly_amp = 6.0;
    double rush_amp = 12.0;
    double noise_std = 1.0;
    double coupling = 0.5;
    double missing_rate = 0.0;
};

struct SynthData {
    SpeedSeries series;
    Tensor distances;
    nlohmann::json truth;
};

inline std::vector<std::pair<std::string, std::string>> synth_entries(const SynthConfig& c) {
    return {{"nodes", std::to_string(c.nodes)},          {"days", std::to_string(c.days)},
            {"minutes", std::to_string(c.minutes)},      {"seed", std::to_string(c.seed)},
            {"daily_amp", format_double(c.daily_amp)},   {"weekly_amp", format_double(c.weekly_amp)},
            {"rush_amp", format_double(c.rush_amp)},     {"noise_std", format_double(c.noise_std)},
            {"coupling", format_double(c.coupling)},     {"missing_rate", format_double(c.missing_rate)}};
}

/// Speeds are base_i + daily sinusoid + weekday rush-hour dips + weekend lift
/// + graph-smoothed Gaussian noise. Nodes sit along a corridor so neighbours
/// fall inside the default adjacency threshold. Day 0 is a Monday.
inline SynthData synth_generate(const SynthConfig& c) {
    if (c.nodes < 1) throw ValidationError("synthetic data needs at least one node");
    if (c.days < 1) throw ValidationError("synthetic data needs at least one day");
    if (c.minutes == 0 || 1440 % c.minutes != 0) throw ValidationError("slice length must divide a day");
    if (c.noise_std < 0 || c.coupling < 0 || c.missing_rate < 0 || c.missing_rate >= 1) {
        throw ValidationError("noise_std, coupling and missing_rate must be nonnegative (missing_rate < 1)");
    }
    std::mt19937_64 rng(c.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
    const std::size_t n = c.nodes;

    std::vector<double> px(n), py(n), base(n), phase(n);
    for (std::size_t i = 0; i < n; ++i) {
        px[i] = i == 0 ? 0.0 : px[i - 1] + uniform(1.0, 2.5);
        py[i] = uniform(-0.3, 0.3);
        base[i] = uniform(55.0, 65.0);
        phase[i] = uniform(-0.3, 0.3);
    }
    Tensor dist({n, n}, std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < n; ++i) {
        dist(i, i) = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const double d = std::hypot(px[i] - px[j], py[i] - py[j]);
            if (d <= 5.0) dist(i, j) = d;
        }
    }
    const Tensor w = build_adjacency(dist);
    std::vector<double> norm(n, 1.0);
    Tensor what({n, n}, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double row = 0, sq = 0;
        for (std::size_t j = 0; j < n; ++j) row += w(i, j);
        for (std::size_t j = 0; j < n; ++j) {
            what(i, j) = row > 0 ? w(i, j) / row : 0.0;
            sq += what(i, j) * what(i, j);
        }
        norm[i] = std::sqrt(1.0 + c.coupling * c.coupling * sq);
    }

    const std::size_t per_day = 1440 / c.minutes;
    const std::size_t t = c.days * per_day;
    SynthData out;
    out.series.values = Tensor({t, n});
    out.series.missing.assign(t * n, 0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<double> z(n);
    constexpr double two_pi = 2.0 * std::numbers::pi;
    for (std::size_t k = 0; k < t; ++k) {
        out.series.timestamps.push_back(static_cast<std::int64_t>(k));
        const std::size_t day = k / per_day;
        const double hour = static_cast<double>((k % per_day) * c.minutes) / 60.0;
        const bool weekend = day % 7 >= 5;
        const double rush = weekend ? 0.0
                                    : std::exp(-(hour - 8.0) * (hour - 8.0) / (2 * 0.75 * 0.75)) +
                                          std::exp(-(hour - 17.5) * (hour - 17.5) / (2 * 0.75 * 0.75));
        for (auto& v : z) v = gauss(rng);
        for (std::size_t i = 0; i < n; ++i) {
            double mix = z[i];
            for (std::size_t j = 0; j < n; ++j) mix += c.coupling * what(i, j) * z[j];
            const double noise = c.noise_std * mix / norm[i];
            const double v = base[i] + c.daily_amp * std::sin(two_pi * hour / 24.0 + phase[i]) - c.rush_amp * rush +
                             (weekend ? c.weekly_amp : 0.0) + noise;
            out.series.values(k, i) = v;
        }
        if (c.missing_rate > 0) {
            for (std::size_t i = 0; i < n; ++i) {
                if (unit(rng) < c.missing_rate) {
                    out.series.values(k, i) = 0.0;
                    out.series.missing[k * n + i] = 1;
                }
            }
        }
    }
    out.distances = dist;
    nlohmann::json truth;
    for (const auto& [k, v] : synth_entries(c)) truth["config"][k] = v;
    truth["slices"] = t;
    truth["base"] = base;
    truth["phase"] = phase;
    truth["position_x"] = px;
    truth["position_y"] = py;
    truth["weekend_days"] = {5, 6};
    truth["rush_hours"] = {8.0, 17.5};
    out.truth = truth;
    return out;
}

// ---------------------------------------------------------------------------
// Writers
// ---------------------------------------------------------------------------

inline void write_speeds_csv(std::ostream& os, const SpeedSeries& s, const std::string& comment = {}) {
    if (!comment.empty()) os << "# " << comment << '\n';
    os << "timestamp";
    for (std::size_t i = 0; i < s.nodes(); ++i) os << ",node_" << i;
    os << '\n';
    for (std::size_t k = 0; k < s.length(); ++k) {
        os << s.timestamps[k];
        for (std::size_t i = 0; i < s.nodes(); ++i) {
            os << ',';
            if (!s.is_missing(k, i)) os << format_double(s.values(k, i));
        }
        os << '\n';
    }
}

inline void write_distances_csv(std::ostream& os, const Tensor& dist, const std::string& comment = {}) {
    if (!comment.empty()) os << "# " << comment << '\n';
    os << "from,to,distance\n";
    for (std::size_t i = 0; i < dist.dim(0); ++i)
        for (std::size_t j = 0; j < dist.dim(1); ++j)
            if (i != j && std::isfinite(dist(i, j))) os << i << ',' << j << ',' << format_double(dist(i, j)) << '\n';
}

} // namespace gacan
