#pragma once

// Temporal multi-head attention and granularity fusion.
//
// Each node attends over its own past: position t of a stream mixes the
// positions t, t - step, t - 2 step, ... with softmax weights computed from a
// shared scoring layer over the pair [x_t || x_{t - i step}]. Heads share the
// coefficients and differ in their projection W_k. Four such streams (one per
// time granularity) are aligned to a common length and fused by one FC layer.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "gacan/autodiff.hpp"
#include "gacan/error.hpp"
#include "gacan/init.hpp"
#include "gacan/parameters.hpp"
#include "gacan/tensor.hpp"

namespace gacan {

enum class Granularity { minute = 0, hour = 1, day = 2, week = 3 };

inline constexpr Granularity all_granularities[] = {Granularity::minute, Granularity::hour, Granularity::day,
                                                    Granularity::week};

inline char granularity_tag(Granularity g) {
    switch (g) {
    case Granularity::minute: return 'm';
    case Granularity::hour: return 'h';
    case Granularity::day: return 'd';
    case Granularity::week: return 'w';
    }
    return '?';
}

/// One granularity's input: t positions (oldest first) of N nodes x C channels.
/// Consecutive positions are `stride` original time slices apart.
struct GranularityWindow {
    Granularity granularity = Granularity::minute;
    std::size_t stride = 1;
    Tensor data; // t x N x C
};

/// How attention scores become coefficients. `per_node` gives every node its
/// own softmax over lags; `node_mean` averages scores over nodes first so all
/// nodes share one coefficient per (position, lag).
enum class ScoreSharing { per_node, node_mean };

struct AttentionSpec {
    std::size_t in_channels = 1;
    std::size_t head_width = 1;
    std::size_t heads = 1;
};

struct AttentionOptions {
    double slope = 0.2;
    std::size_t lag_step = 1; // positions per lag
    std::size_t max_lags = 0; // 0: every lag that stays inside the window
    ScoreSharing sharing = ScoreSharing::per_node;
    bool activation = true; // sigmoid on the head outputs
};

inline std::string head_param(const std::string& prefix, std::size_t k) {
    return prefix + ".head" + std::to_string(k) + ".W";
}

/// prefix.head{k}.W : C x C_head, prefix.score.W : 2C x 1, prefix.score.b : 1
inline void add_attention_params(ParameterStore& store, const std::string& prefix, const AttentionSpec& spec,
                                 std::uint64_t seed) {
    if (spec.heads < 1 || spec.in_channels < 1 || spec.head_width < 1) {
        throw ValidationError("attention needs at least one head and one channel");
    }
    for (std::size_t k = 0; k < spec.heads; ++k) {
        const auto name = head_param(prefix, k);
        store.add(name, glorot_uniform({spec.in_channels, spec.head_width}, spec.in_channels, spec.head_width, seed, name));
    }
    store.add(prefix + ".score.W", glorot_uniform({2 * spec.in_channels, 1}, 2 * spec.in_channels, 1, seed, prefix + ".score.W"));
    store.add(prefix + ".score.b", Tensor({1}, 0.0));
}

/// Index bookkeeping for the (position, lag) grid of one stream.
struct LagLayout {
    std::size_t positions = 0;
    std::size_t lags = 0;
    std::size_t step = 1;
    std::vector<std::size_t> current; // t for each (t, i), row-major
    std::vector<std::size_t> lagged;  // t - i*step, or t when that falls outside
    Tensor mask;                      // positions x lags, 1 where the lag exists
};

inline LagLayout make_lag_layout(std::size_t positions, std::size_t step, std::size_t max_lags) {
    if (positions < 1) throw ValidationError("attention window needs at least one position");
    if (step < 1) throw ValidationError("lag step must be positive");
    LagLayout lay;
    lay.positions = positions;
    lay.step = step;
    lay.lags = (positions - 1) / step + 1;
    if (max_lags > 0) lay.lags = std::min(lay.lags, max_lags);
    lay.mask = Tensor({positions, lay.lags}, 0.0);
    for (std::size_t t = 0; t < positions; ++t) {
        for (std::size_t i = 0; i < lay.lags; ++i) {
            const bool ok = i * step <= t;
            lay.current.push_back(t);
            lay.lagged.push_back(ok ? t - i * step : t);
            lay.mask(t, i) = ok ? 1.0 : 0.0;
        }
    }
    return lay;
}

namespace detail {

inline void check_stream(const ad::Var& x, const char* what) {
    if (x.rank() != 3) throw DimensionError(std::string(what) + " expects a t x N x C stream, got " + shape_str(x.shape()));
}

inline ad::Var coefficients(ad::Tape& tape, ParameterStore& store, const std::string& prefix, const ad::Var& x,
                            const LagLayout& lay, const AttentionOptions& opt) {
    using namespace ad;
    const std::size_t t = x.dim(0), n = x.dim(1), c = x.dim(2);
    Var w = tape.parameter(store, prefix + ".score.W");
    Var b = tape.parameter(store, prefix + ".score.b");
    if (w.shape() != Shape{2 * c, 1}) {
        throw DimensionError("score weights " + shape_str(w.shape()) + " do not match " + std::to_string(c) + " channels");
    }
    // FC([x_t || x_lag]) = x_t w_cur + x_lag w_lag + b, evaluated once per position.
    Var flat = reshape(x, {t * n, c});
    Var u = reshape(matmul(flat, slice(w, 0, 0, c)), {t, n});
    Var v = reshape(matmul(flat, slice(w, 0, c, 2 * c)), {t, n});
    Var pair = add(gather_rows(u, lay.current), gather_rows(v, lay.lagged)); // (t*L) x N
    Var score = leaky_relu(add_bias(reshape(pair, {t * lay.lags * n, 1}), b), opt.slope);
    score = reshape(score, {t, lay.lags, n});
    if (opt.sharing == ScoreSharing::node_mean) return masked_softmax(mean_axis(score, 2), lay.mask, 1);
    Tensor mask({t, lay.lags, n});
    for (std::size_t p = 0; p < t; ++p)
        for (std::size_t i = 0; i < lay.lags; ++i)
            for (std::size_t q = 0; q < n; ++q) mask(p, i, q) = lay.mask(p, i);
    return masked_softmax(score, mask, 1);
}

} // namespace detail

/// Attention coefficients of a t x N x C stream. Returns t x L x N
/// (per-node sharing) or t x L (node-mean sharing); entry [t, i] weights lag i,
/// rows sum to one over the lags that exist.
inline ad::Var attention_coeffs(ad::Tape& tape, ParameterStore& store, const std::string& prefix, const ad::Var& x,
                                const AttentionOptions& opt = {}) {
    gacan::detail::check_stream(x, "attention_coeffs");
    const auto lay = make_lag_layout(x.dim(0), opt.lag_step, opt.max_lags);
    return gacan::detail::coefficients(tape, store, prefix, x, lay, opt);
}

inline Tensor attention_coeffs(const GranularityWindow& window, ParameterStore& store, const std::string& prefix,
                               const AttentionOptions& opt = {}) {
    ad::Tape tape;
    return attention_coeffs(tape, store, prefix, tape.constant(window.data), opt).value();
}

/// K-head temporal attention: h_t = ||_k sigma(sum_i alpha[t,i] x_{t - i step} W_k).
/// Input t x N x C, output t x N x (K * C_head).
inline ad::Var temporal_ma(ad::Tape& tape, ParameterStore& store, const std::string& prefix, const ad::Var& x,
                           std::size_t heads, const AttentionOptions& opt = {}) {
    using namespace ad;
    gacan::detail::check_stream(x, "temporal_ma");
    if (heads < 1) throw ValidationError("temporal_ma needs K >= 1");
    const std::size_t t = x.dim(0), n = x.dim(1), c = x.dim(2);
    const auto lay = make_lag_layout(t, opt.lag_step, opt.max_lags);
    Var alpha = gacan::detail::coefficients(tape, store, prefix, x, lay, opt);

    std::vector<Var> ws;
    for (std::size_t k = 0; k < heads; ++k) {
        ws.push_back(tape.parameter(store, head_param(prefix, k)));
        if (ws.back().rank() != 2 || ws.back().dim(0) != c) {
            throw DimensionError("head weights " + shape_str(ws.back().shape()) + " do not match " + std::to_string(c) + " channels");
        }
    }
    Var w = heads == 1 ? ws.front() : concat(ws, 1);
    const std::size_t width = w.dim(1);

    // Mixing is linear, so aggregate the raw stream first and project once.
    Var lagged = gather_rows(x, lay.lagged); // (t*L) x N x C
    Var mixed;
    if (opt.sharing == ScoreSharing::node_mean) {
        Var a = reshape(alpha, {t, 1, lay.lags});
        Var xs = reshape(lagged, {t, lay.lags, n * c});
        mixed = reshape(matmul(a, xs), {t * n, c});
    } else {
        Var a = reshape(permute(alpha, {0, 2, 1}), {t * n, 1, lay.lags});
        Var xs = reshape(permute(reshape(lagged, {t, lay.lags, n, c}), {0, 2, 1, 3}), {t * n, lay.lags, c});
        mixed = reshape(matmul(a, xs), {t * n, c});
    }
    Var h = matmul(mixed, w);
    if (opt.activation) h = sigmoid(h);
    return reshape(h, {t, n, width});
}

inline Tensor temporal_ma(const GranularityWindow& window, ParameterStore& store, const std::string& prefix,
                          std::size_t heads, const AttentionOptions& opt = {}) {
    ad::Tape tape;
    return temporal_ma(tape, store, prefix, tape.constant(window.data), heads, opt).value();
}

// ---------------------------------------------------------------------------
// Fusion
// ---------------------------------------------------------------------------

/// One input slot of a fusion layer.
struct FusionSlot {
    std::string name;
    std::size_t length = 1; // stream positions before alignment
};

inline std::string align_param(const std::string& prefix, const std::string& slot) {
    return prefix + ".align." + slot;
}

/// prefix.align.<slot> : t_align x length (only when length != t_align),
/// prefix.fuse.W : (slots * features) x out, prefix.fuse.b : out
inline void add_fusion_params(ParameterStore& store, const std::string& prefix, const std::vector<FusionSlot>& slots,
                              std::size_t features, std::size_t t_align, std::size_t out_channels, std::uint64_t seed) {
    if (slots.empty()) throw ValidationError("fusion needs at least one stream slot");
    if (out_channels < 1 || features < 1 || t_align < 1) throw ValidationError("fusion sizes must be positive");
    for (const auto& s : slots) {
        if (s.length != t_align) {
            const auto name = align_param(prefix, s.name);
            store.add(name, glorot_uniform({t_align, s.length}, s.length, t_align, seed, name));
        }
    }
    const std::size_t in = slots.size() * features;
    store.add(prefix + ".fuse.W", glorot_uniform({in, out_channels}, in, out_channels, seed, prefix + ".fuse.W"));
    store.add(prefix + ".fuse.b", Tensor({out_channels}, 0.0));
}

/// Maps a t x N x F stream to t_align positions with a learned convex
/// combination over time (rows of softmax(logits) sum to one, so a stream
/// that is constant in time stays constant).
inline ad::Var align_stream(ad::Tape& tape, ParameterStore& store, const std::string& prefix, const std::string& slot,
                            const ad::Var& stream, std::size_t t_align) {
    using namespace ad;
    const std::size_t t = stream.dim(0), n = stream.dim(1), f = stream.dim(2);
    if (t == t_align) return stream;
    Var logits = tape.parameter(store, align_param(prefix, slot));
    if (logits.shape() != Shape{t_align, t}) {
        throw DimensionError("alignment " + shape_str(logits.shape()) + " does not map " + std::to_string(t) +
                             " positions to " + std::to_string(t_align));
    }
    Var mix = softmax(logits, 1);
    return reshape(matmul(mix, reshape(stream, {t, n * f})), {t_align, n, f});
}

struct FuseOptions {
    double slope = 0.2;
    bool activation = true; // leaky ReLU on the fused output
};

/// Concatenates the aligned streams along channels (absent slots are zero
/// filled) and applies the fusion FC: t_align x N x C_out.
inline ad::Var fuse(ad::Tape& tape, ParameterStore& store, const std::string& prefix,
                    const std::vector<FusionSlot>& slots, const std::vector<std::optional<ad::Var>>& streams,
                    std::size_t t_align, const FuseOptions& opt = {}) {
    using namespace ad;
    if (slots.size() != streams.size()) throw ValidationError("fuse: slot and stream counts differ");
    std::optional<Shape> shape;
    for (const auto& s : streams) {
        if (!s) continue;
        gacan::detail::check_stream(*s, "fuse");
        if (shape && (*shape)[1] != s->dim(1)) throw DimensionError("fuse: streams disagree on node count");
        if (shape && (*shape)[2] != s->dim(2)) throw DimensionError("fuse: streams disagree on channel count");
        shape = s->shape();
    }
    if (!shape) throw ValidationError("fuse: no streams present");
    const std::size_t n = (*shape)[1], f = (*shape)[2];
    std::vector<Var> parts;
    for (std::size_t i = 0; i < slots.size(); ++i) {
        if (streams[i]) parts.push_back(align_stream(tape, store, prefix, slots[i].name, *streams[i], t_align));
        else parts.push_back(tape.constant(Tensor({t_align, n, f}, 0.0)));
    }
    Var cat = parts.size() == 1 ? parts.front() : concat(parts, 2);
    Var w = tape.parameter(store, prefix + ".fuse.W");
    Var b = tape.parameter(store, prefix + ".fuse.b");
    if (w.dim(0) != cat.dim(2)) {
        throw DimensionError("fusion weights " + shape_str(w.shape()) + " do not match " + std::to_string(cat.dim(2)) + " features");
    }
    const std::size_t cout = w.dim(1);
    Var z = add_bias(matmul(reshape(cat, {t_align * n, cat.dim(2)}), w), b);
    if (opt.activation) z = leaky_relu(z, opt.slope);
    return reshape(z, {t_align, n, cout});
}

} // namespace gacan
