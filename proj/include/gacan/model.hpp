#pragma once

// The GACAN network: ACA blocks (attention, Chebyshev convolution, attention,
// FC, layer norm) followed by a single-head temporal attention and an output
// FC that maps the final feature map to an H x N forecast.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gacan/attention.hpp"
#include "gacan/autodiff.hpp"
#include "gacan/error.hpp"
#include "gacan/graph.hpp"
#include "gacan/init.hpp"
#include "gacan/keyvalue.hpp"
#include "gacan/parameters.hpp"
#include "gacan/sample.hpp"

namespace gacan {

/// How the attention sets after the first one see the single fused map.
/// `fused_dilated`: four MAs with lag strides 1, 2, 4, 8 (capped at the map
/// length) fused again. `single`: one MA.
enum class SecondMa { fused_dilated, single };

/// How periodic granularities are windowed. `block`: t blocks of H
/// consecutive slices, one block per position with the H slices as channels.
/// `strided`: t + 1 single slices spaced by the stride, ending at t0.
enum class WindowMode { block, strided };

struct ModelConfig {
    std::size_t n_nodes = 0;
    std::size_t history = 0; // Q; 0 selects 2 s_w with weekly data, else 2 s_d
    std::size_t horizon = 12;
    std::size_t minutes = 5; // p
    std::size_t heads = 4;
    std::size_t cheb_order = 3;
    std::size_t blocks = 2;
    std::vector<std::size_t> channels{16, 16};
    std::size_t head_width = 0; // 0: the block's channel width
    std::size_t t_align = 0;    // 0: horizon
    double slope = 0.2;
    double norm_eps = 1e-5;
    SecondMa second_ma = SecondMa::fused_dilated;
    WindowMode window_mode = WindowMode::block;
    ScoreSharing score_sharing = ScoreSharing::per_node;
    GranularityMask mask{Granularity::minute, Granularity::hour, Granularity::day, Granularity::week};
    std::uint64_t seed = 0;
    // Positions per granularity; 0 selects Q / s (Q for the recent stream).
    std::size_t t_m = 0;
    std::size_t t_h = 0;
    std::size_t t_d = 0;
    std::size_t t_w = 0;

    bool operator==(const ModelConfig&) const = default;
};

inline Strides strides_of(const ModelConfig& c) { return granularity_strides(c.minutes); }

inline std::size_t effective_history(const ModelConfig& c) {
    if (c.history > 0) return c.history;
    const Strides s = strides_of(c);
    return c.mask.has(Granularity::week) ? 2 * s.w : 2 * s.d;
}

inline std::size_t& count_field(ModelConfig& c, Granularity g) {
    switch (g) {
    case Granularity::minute: return c.t_m;
    case Granularity::hour: return c.t_h;
    case Granularity::day: return c.t_d;
    case Granularity::week: return c.t_w;
    }
    return c.t_m;
}

inline std::size_t count_field(const ModelConfig& c, Granularity g) {
    switch (g) {
    case Granularity::minute: return c.t_m;
    case Granularity::hour: return c.t_h;
    case Granularity::day: return c.t_d;
    case Granularity::week: return c.t_w;
    }
    return c.t_m;
}

/// Number of periods (or recent slices) a granularity looks back.
inline std::size_t granularity_count(const ModelConfig& c, Granularity g) {
    if (const std::size_t t = count_field(c, g)) return t;
    const std::size_t q = effective_history(c);
    return q / strides_of(c).of(g);
}

inline std::size_t t_align_of(const ModelConfig& c) { return c.t_align ? c.t_align : c.horizon; }

inline std::size_t head_width_of(const ModelConfig& c, std::size_t block) {
    return c.head_width ? c.head_width : c.channels.at(block);
}

/// Positions and channels of one input stream.
struct StreamShape {
    std::size_t length = 0;
    std::size_t channels = 0;
};

inline StreamShape stream_shape(const ModelConfig& c, Granularity g) {
    const std::size_t t = granularity_count(c, g);
    if (g == Granularity::minute) return {t, 1};
    if (c.window_mode == WindowMode::block) return {t, c.horizon};
    return {t + 1, 1};
}

/// Slices of history (including t0) a sample needs.
inline std::size_t required_history(const ModelConfig& c) {
    std::size_t need = 1;
    const Strides s = strides_of(c);
    for (auto g : all_granularities) {
        if (!c.mask.has(g)) continue;
        const std::size_t t = granularity_count(c, g);
        if (g == Granularity::minute) need = std::max(need, t);
        else if (c.window_mode == WindowMode::block) need = std::max(need, t * s.of(g));
        else need = std::max(need, t * s.of(g) + 1);
    }
    return need;
}

/// Throws ValidationError naming every offending field.
inline void validate(const ModelConfig& c) {
    std::vector<std::string> bad;
    auto check = [&](bool ok, const std::string& what) {
        if (!ok) bad.push_back(what);
    };
    check(c.n_nodes >= 1, "nodes (must be >= 1)");
    check(c.horizon >= 1, "horizon (must be >= 1)");
    check(c.heads >= 1, "heads (must be >= 1)");
    check(c.cheb_order >= 1, "cheb_order (must be >= 1)");
    check(c.blocks >= 1, "blocks (must be >= 1)");
    check(c.channels.size() == c.blocks, "channels (need one width per block)");
    check(std::all_of(c.channels.begin(), c.channels.end(), [](std::size_t v) { return v >= 1; }),
          "channels (widths must be >= 1)");
    check(c.slope > 0.0 && c.slope < 1.0, "slope (must lie in (0,1))");
    check(c.norm_eps > 0.0, "norm_eps (must be > 0)");
    check(!c.mask.empty(), "mask (must name at least one granularity)");
    const bool p_ok = c.minutes >= 1 && 60 % c.minutes == 0;
    check(p_ok, "minutes (must divide 60)");
    if (p_ok && bad.empty()) {
        const Strides s = strides_of(c);
        const std::size_t q = effective_history(c);
        for (auto g : all_granularities) {
            if (!c.mask.has(g)) continue;
            const std::string tag(1, granularity_tag(g));
            if (count_field(c, g) == 0) {
                check(q % s.of(g) == 0 && q / s.of(g) >= 1,
                      "history (Q=" + std::to_string(q) + " must be a positive multiple of s_" + tag + "=" +
                          std::to_string(s.of(g)) + ", or set t_" + tag + ")");
            }
            if (g != Granularity::minute && c.window_mode == WindowMode::block) {
                check(c.horizon <= s.of(g), "horizon (H=" + std::to_string(c.horizon) + " exceeds s_" + tag + "=" +
                                                std::to_string(s.of(g)) + ", so the newest " + tag +
                                                " block would reach past t0)");
            }
        }
    }
    if (!bad.empty()) {
        std::string msg = "invalid model config:";
        for (const auto& b : bad) msg += " " + b + ";";
        msg.pop_back();
        throw ValidationError(msg);
    }
}

// ---------------------------------------------------------------------------
// key=value form, shared by run configs and checkpoint headers
// ---------------------------------------------------------------------------

inline const char* to_string(SecondMa m) { return m == SecondMa::single ? "single" : "fused-dilated"; }
inline const char* to_string(WindowMode m) { return m == WindowMode::strided ? "strided" : "block"; }
inline const char* to_string(ScoreSharing m) { return m == ScoreSharing::node_mean ? "node-mean" : "per-node"; }

/// Applies one setting; returns false if the key is not a model key.
inline bool set_model_key(ModelConfig& c, std::string_view key, std::string_view value) {
    using namespace kv;
    const auto v = trim(value);
    if (key == "nodes") c.n_nodes = to_size(key, v);
    else if (key == "history") c.history = to_size(key, v);
    else if (key == "horizon") c.horizon = to_size(key, v);
    else if (key == "minutes") c.minutes = to_size(key, v);
    else if (key == "heads") c.heads = to_size(key, v);
    else if (key == "cheb_order") c.cheb_order = to_size(key, v);
    else if (key == "blocks") c.blocks = to_size(key, v);
    else if (key == "channels") c.channels = to_size_list(key, v);
    else if (key == "head_width") c.head_width = to_size(key, v);
    else if (key == "t_align") c.t_align = to_size(key, v);
    else if (key == "slope") c.slope = to_real(key, v);
    else if (key == "norm_eps") c.norm_eps = to_real(key, v);
    else if (key == "seed") c.seed = to_u64(key, v);
    else if (key == "t_m") c.t_m = to_size(key, v);
    else if (key == "t_h") c.t_h = to_size(key, v);
    else if (key == "t_d") c.t_d = to_size(key, v);
    else if (key == "t_w") c.t_w = to_size(key, v);
    else if (key == "mask") c.mask = GranularityMask::parse(v);
    else if (key == "second_ma") {
        if (v == "fused-dilated") c.second_ma = SecondMa::fused_dilated;
        else if (v == "single") c.second_ma = SecondMa::single;
        else bad(key, v, "fused-dilated or single");
    } else if (key == "window_mode") {
        if (v == "block") c.window_mode = WindowMode::block;
        else if (v == "strided") c.window_mode = WindowMode::strided;
        else bad(key, v, "block or strided");
    } else if (key == "score_sharing") {
        if (v == "per-node") c.score_sharing = ScoreSharing::per_node;
        else if (v == "node-mean") c.score_sharing = ScoreSharing::node_mean;
        else bad(key, v, "per-node or node-mean");
    } else return false;
    return true;
}

/// Effective settings with defaults resolved, in a fixed order.
inline std::vector<std::pair<std::string, std::string>> model_entries(const ModelConfig& c) {
    using kv::join;
    std::vector<std::pair<std::string, std::string>> e{
        {"nodes", std::to_string(c.n_nodes)},
        {"history", std::to_string(effective_history(c))},
        {"horizon", std::to_string(c.horizon)},
        {"minutes", std::to_string(c.minutes)},
        {"heads", std::to_string(c.heads)},
        {"cheb_order", std::to_string(c.cheb_order)},
        {"blocks", std::to_string(c.blocks)},
        {"channels", join(c.channels)},
        {"head_width", std::to_string(c.head_width)},
        {"t_align", std::to_string(t_align_of(c))},
        {"slope", format_double(c.slope)},
        {"norm_eps", format_double(c.norm_eps)},
        {"second_ma", to_string(c.second_ma)},
        {"window_mode", to_string(c.window_mode)},
        {"score_sharing", to_string(c.score_sharing)},
        {"mask", c.mask.str()},
        {"seed", std::to_string(c.seed)},
    };
    for (auto g : all_granularities) {
        e.emplace_back(std::string("t_") + granularity_tag(g), std::to_string(granularity_count(c, g)));
    }
    return e;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct GacanModel {
    ModelConfig config;
    ParameterStore params;
};

inline std::string block_prefix(std::size_t b) { return "block" + std::to_string(b); }

inline std::string slot_name(Granularity g) { return std::string(1, granularity_tag(g)); }

/// Lag strides of the re-sampled streams inside a block.
inline std::vector<std::size_t> dilation_strides(const ModelConfig& c) {
    if (c.second_ma == SecondMa::single) return {1};
    const std::size_t cap = std::max<std::size_t>(1, t_align_of(c) - 1);
    std::vector<std::size_t> out;
    for (std::size_t s : {1, 2, 4, 8}) out.push_back(std::min(s, cap));
    return out;
}

inline std::vector<FusionSlot> dilated_slots(const ModelConfig& c) {
    std::vector<FusionSlot> slots;
    const auto strides = dilation_strides(c);
    for (std::size_t j = 0; j < strides.size(); ++j) slots.push_back({"r" + std::to_string(j), t_align_of(c)});
    return slots;
}

/// Slots of the first attention set of block 0. Disabled granularities keep
/// their slot (zero padded) so the fusion weights have the same shape in
/// every ablation mode.
inline std::vector<FusionSlot> granularity_slots(const ModelConfig& c) {
    std::vector<FusionSlot> slots;
    for (auto g : all_granularities) {
        slots.push_back({slot_name(g), c.mask.has(g) ? stream_shape(c, g).length : t_align_of(c)});
    }
    return slots;
}

namespace detail {

inline void add_dilated_params(ParameterStore& s, const ModelConfig& c, const std::string& prefix, std::size_t in,
                               std::size_t width, std::size_t out) {
    for (const auto& slot : dilated_slots(c)) add_attention_params(s, prefix + "." + slot.name, {in, width, c.heads}, c.seed);
    add_fusion_params(s, prefix, dilated_slots(c), c.heads * width, t_align_of(c), out, c.seed);
}

} // namespace detail

/// Deterministic parameters from config.seed. Tensors are seeded by name, so
/// equally named tensors agree across configurations that share a seed.
inline GacanModel init_model(const ModelConfig& config) {
    validate(config);
    GacanModel m{config, {}};
    ParameterStore& s = m.params;
    const ModelConfig& c = m.config;
    const std::uint64_t seed = c.seed;
    for (std::size_t b = 0; b < c.blocks; ++b) {
        const std::string p = block_prefix(b);
        const std::size_t width = head_width_of(c, b);
        const std::size_t out = c.channels[b];
        if (b == 0) {
            for (auto g : all_granularities) {
                if (!c.mask.has(g)) continue;
                add_attention_params(s, p + ".att1." + slot_name(g), {stream_shape(c, g).channels, width, c.heads}, seed);
            }
            add_fusion_params(s, p + ".att1", granularity_slots(c), c.heads * width, t_align_of(c), out, seed);
        } else {
            gacan::detail::add_dilated_params(s, c, p + ".att1", c.channels[b - 1], width, out);
        }
        for (std::size_t k = 0; k < c.cheb_order; ++k) {
            const auto name = p + ".cheb.theta" + std::to_string(k);
            s.add(name, glorot_uniform({out, out}, out, out, seed, name));
        }
        gacan::detail::add_dilated_params(s, c, p + ".att2", out, width, out);
        s.add(p + ".fc.W", glorot_uniform({out, out}, out, out, seed, p + ".fc.W"));
        s.add(p + ".fc.b", Tensor({out}, 0.0));
        s.add(p + ".norm.gain", Tensor({out}, 1.0));
        s.add(p + ".norm.bias", Tensor({out}, 0.0));
    }
    const std::size_t last = c.channels.back();
    add_attention_params(s, "out.att", {last, last, 1}, seed);
    const std::size_t flat = t_align_of(c) * last;
    s.add("out.fc.W", glorot_uniform({flat, c.horizon}, flat, c.horizon, seed, "out.fc.W"));
    s.add("out.fc.b", Tensor({c.horizon}, 0.0));
    return m;
}

inline GacanModel init_model(ModelConfig config, std::uint64_t seed) {
    config.seed = seed;
    return init_model(config);
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace detail {

inline AttentionOptions attention_options(const ModelConfig& c, std::size_t lag_step) {
    AttentionOptions o;
    o.slope = c.slope;
    o.lag_step = lag_step;
    o.sharing = c.score_sharing;
    return o;
}

/// Re-samples a T x N x C map into dilated streams, attends and fuses.
inline ad::Var dilated_attention(ad::Tape& tape, GacanModel& m, const std::string& prefix, const ad::Var& map) {
    const ModelConfig& c = m.config;
    const auto strides = dilation_strides(c);
    const auto slots = dilated_slots(c);
    std::vector<std::optional<ad::Var>> streams;
    for (std::size_t j = 0; j < strides.size(); ++j) {
        streams.emplace_back(
            temporal_ma(tape, m.params, prefix + "." + slots[j].name, map, c.heads, attention_options(c, strides[j])));
    }
    return fuse(tape, m.params, prefix, slots, streams, t_align_of(c), {c.slope, true});
}

inline void check_streams(const ModelConfig& c, const StreamSet& in) {
    for (auto g : all_granularities) {
        if (!c.mask.has(g)) continue;
        const auto& s = in[static_cast<std::size_t>(g)];
        const std::string tag(1, granularity_tag(g));
        if (!s) throw ValidationError("granularity '" + tag + "' is enabled but its stream is missing");
        const StreamShape want = stream_shape(c, g);
        if (s->shape() != Shape{want.length, c.n_nodes, want.channels}) {
            throw DimensionError("stream '" + tag + "' has shape " + shape_str(s->shape()) + ", expected " +
                                 shape_str({want.length, c.n_nodes, want.channels}));
        }
    }
}

inline void check_graph(const ModelConfig& c, const SpectralOperator& op) {
    if (op.n_nodes() != c.n_nodes) {
        throw DimensionError("graph has " + std::to_string(op.n_nodes()) + " nodes, model expects " + std::to_string(c.n_nodes));
    }
}

} // namespace detail

/// One ACA block. Block 0 reads the granularity streams; later blocks read
/// the previous block's T_align x N x C map. Returns T_align x N x C_b.
inline ad::Var aca_forward(ad::Tape& tape, GacanModel& m, std::size_t b, const StreamSet* streams,
                           const ad::Var* map, const SpectralOperator& op) {
    using namespace ad;
    const ModelConfig& c = m.config;
    ParameterStore& s = m.params;
    const std::string p = block_prefix(b);
    Var att1;
    if (b == 0) {
        if (!streams) throw ContractError("block 0 needs the granularity streams");
        const auto slots = granularity_slots(c);
        std::vector<std::optional<Var>> outs;
        for (auto g : all_granularities) {
            const auto& x = (*streams)[static_cast<std::size_t>(g)];
            if (!c.mask.has(g)) {
                outs.emplace_back(std::nullopt);
                continue;
            }
            outs.emplace_back(temporal_ma(tape, s, p + ".att1." + slot_name(g), tape.constant(*x), c.heads,
                                          gacan::detail::attention_options(c, 1)));
        }
        att1 = fuse(tape, s, p + ".att1", slots, outs, t_align_of(c), {c.slope, true});
    } else {
        if (!map) throw ContractError("blocks after the first need the previous feature map");
        att1 = gacan::detail::dilated_attention(tape, m, p + ".att1", *map);
    }
    std::vector<Var> theta;
    for (std::size_t k = 0; k < c.cheb_order; ++k) theta.push_back(tape.parameter(s, p + ".cheb.theta" + std::to_string(k)));
    Var spatial = relu(cheb_conv(op.scaled_laplacian, att1, theta));
    Var att2 = gacan::detail::dilated_attention(tape, m, p + ".att2", spatial);
    Var fc = fully_connected(att2, tape.parameter(s, p + ".fc.W"), tape.parameter(s, p + ".fc.b"), c.slope);
    return layer_norm(fc, tape.parameter(s, p + ".norm.gain"), tape.parameter(s, p + ".norm.bias"), c.norm_eps);
}

/// Full forecast on a tape: H x N (normalized units).
inline ad::Var model_forward(ad::Tape& tape, GacanModel& m, const SpectralOperator& op, const StreamSet& streams) {
    using namespace ad;
    const ModelConfig& c = m.config;
    gacan::detail::check_graph(c, op);
    gacan::detail::check_streams(c, streams);
    Var map = aca_forward(tape, m, 0, &streams, nullptr, op);
    for (std::size_t b = 1; b < c.blocks; ++b) map = aca_forward(tape, m, b, nullptr, &map, op);

    Var h = temporal_ma(tape, m.params, "out.att", map, 1, gacan::detail::attention_options(c, 1));
    const std::size_t t = h.dim(0), n = h.dim(1), ch = h.dim(2);
    Var flat = reshape(permute(h, {1, 0, 2}), {n, t * ch});
    Var z = add_bias(matmul(flat, tape.parameter(m.params, "out.fc.W")), tape.parameter(m.params, "out.fc.b"));
    return transpose(z);
}

inline Tensor predict(GacanModel& m, const SpectralOperator& op, const StreamSet& streams) {
    ad::Tape tape;
    return model_forward(tape, m, op, streams).value();
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline Checkpoint model_checkpoint(const GacanModel& m, std::vector<std::pair<std::string, std::string>> extra = {}) {
    Checkpoint ck;
    for (auto& [k, v] : model_entries(m.config)) ck.header.emplace_back("model." + k, v);
    for (auto& kvp : extra) ck.header.push_back(std::move(kvp));
    ck.params = m.params;
    return ck;
}

/// Rebuilds the model described by a checkpoint header and checks that the
/// stored tensors match the shapes that config implies.
inline GacanModel model_from_checkpoint(const Checkpoint& ck) {
    ModelConfig c;
    for (const auto& [k, v] : ck.header) {
        if (k.rfind("model.", 0) == 0 && !set_model_key(c, k.substr(6), v)) {
            throw ValidationError("unknown model key in checkpoint: " + k);
        }
    }
    GacanModel m = init_model(c);
    if (m.params.names() != ck.params.names()) throw ValidationError("checkpoint tensors do not match its model config");
    for (const auto& name : m.params.names()) {
        if (m.params.value(name).shape() != ck.params.value(name).shape()) {
            throw ValidationError("checkpoint tensor " + name + " has shape " + shape_str(ck.params.value(name).shape()) +
                                  ", config implies " + shape_str(m.params.value(name).shape()));
        }
        m.params.value(name) = ck.params.value(name);
    }
    return m;
}

} // namespace gacan
