#pragma once

// Finite-difference gradient checks at three scopes: every tape primitive on
// random inputs, one ACA block, and the whole toy model.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "gacan/gradcheck.hpp"
#include "gacan/graph.hpp"
#include "gacan/model.hpp"
#include "gacan/trainer.hpp"

namespace gacan {

enum class GradScope { primitives, block, model };

inline GradScope parse_grad_scope(std::string_view s) {
    if (s == "primitives") return GradScope::primitives;
    if (s == "block") return GradScope::block;
    if (s == "model") return GradScope::model;
    throw ConfigError("unknown gradcheck scope '" + std::string(s) + "' (expected primitives, block or model)");
}

inline const char* to_string(GradScope s) {
    switch (s) {
    case GradScope::primitives: return "primitives";
    case GradScope::block: return "block";
    case GradScope::model: return "model";
    }
    return "?";
}

/// Documented tolerance per scope.
inline double grad_tolerance(GradScope s) {
    switch (s) {
    case GradScope::primitives: return 1e-5;
    case GradScope::block: return 1e-4;
    case GradScope::model: return 1e-3;
    }
    return 0.0;
}

struct GradSuiteOptions {
    std::size_t trials = 100; // random inputs per primitive
    double step = 1e-6;       // central-difference h
    std::uint64_t seed = 0;
    bool corrupt = false;     // negative control: skews one backward rule
};

struct GradSuiteEntry {
    std::string name;
    std::size_t checks = 0;
    double worst = 0.0;
    bool pass = true;
};

struct GradSuiteReport {
    GradScope scope = GradScope::primitives;
    double tolerance = 0.0;
    std::vector<GradSuiteEntry> entries;

    bool passed() const {
        return std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.pass; });
    }
    double worst() const {
        double w = 0.0;
        for (const auto& e : entries) w = std::max(w, e.worst);
        return w;
    }
};

/// N=4, H=2, K=2, r=2, one block, three positions per granularity. p=30 keeps
/// H within the hourly stride.
inline ModelConfig gradcheck_toy_config() {
    ModelConfig c;
    c.n_nodes = 4;
    c.horizon = 2;
    c.minutes = 30;
    c.heads = 2;
    c.cheb_order = 2;
    c.blocks = 1;
    c.channels = {4};
    c.t_m = c.t_h = c.t_d = c.t_w = 3;
    c.seed = 42;
    return c;
}

namespace detail {

/// Identity whose backward rule scales the incoming gradient by 1.5.
inline ad::Var skewed_identity(const ad::Var& x) {
    return x.tape()->record(x.value(), {x}, [](const Tensor& g, std::span<Tensor* const> gi) {
        if (!gi[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += 1.5 * g[i];
    });
}

inline Tensor uniform_tensor(Shape shape, std::mt19937_64& rng, double lo, double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(std::move(shape));
    for (auto& v : t.raw()) v = u(rng);
    return t;
}

/// Uniform in [lo, hi] but at least `gap` away from 0 (kink exclusion).
inline Tensor away_from_zero(Shape shape, std::mt19937_64& rng, double lo, double hi, double gap) {
    Tensor t = uniform_tensor(std::move(shape), rng, lo, hi);
    for (auto& v : t.raw()) {
        if (std::abs(v) < gap) v = v < 0 ? v - gap : v + gap;
    }
    return t;
}

/// Connected random graph: nodes on a line with unit-ish spacing.
inline SpectralOperator random_line_operator(std::size_t n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> gap(0.5, 2.0);
    std::vector<double> x(n, 0.0);
    for (std::size_t i = 1; i < n; ++i) x[i] = x[i - 1] + gap(rng);
    Tensor d({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) d(i, j) = std::abs(x[i] - x[j]);
    return make_spectral_operator(build_adjacency(d));
}

inline StreamSet random_streams(const ModelConfig& c, std::mt19937_64& rng) {
    StreamSet s;
    for (auto g : all_granularities) {
        if (!c.mask.has(g)) continue;
        const StreamShape sh = stream_shape(c, g);
        s[static_cast<std::size_t>(g)] = uniform_tensor({sh.length, c.n_nodes, sh.channels}, rng, -2.0, 2.0);
    }
    return s;
}

/// One primitive under test: draws inputs, builds the output from them.
struct PrimitiveCase {
    std::string name;
    std::function<std::vector<Tensor>(std::mt19937_64&)> inputs;
    std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)> build;
};

inline std::vector<PrimitiveCase> primitive_cases() {
    using namespace ad;
    using T = std::vector<Tensor>;
    using V = const std::vector<Var>&;
    auto u = [](Shape s, double lo = -2.0, double hi = 2.0) {
        return [s, lo, hi](std::mt19937_64& r) { return uniform_tensor(s, r, lo, hi); };
    };
    auto one = [](auto gen) { return [gen](std::mt19937_64& r) { return T{gen(r)}; }; };
    auto two = [](auto g1, auto g2) { return [g1, g2](std::mt19937_64& r) { return T{g1(r), g2(r)}; }; };
    std::vector<PrimitiveCase> cs;
    cs.push_back({"matmul", two(u({3, 4}), u({4, 2})), [](Tape&, V x) { return matmul(x[0], x[1]); }});
    cs.push_back({"matmul_batched", two(u({2, 3, 4}), u({2, 4, 2})), [](Tape&, V x) { return matmul(x[0], x[1]); }});
    cs.push_back({"reshape", one(u({2, 6})), [](Tape&, V x) { return reshape(x[0], {3, 4}); }});
    cs.push_back({"permute", one(u({2, 3, 4})), [](Tape&, V x) { return permute(x[0], {2, 0, 1}); }});
    cs.push_back({"transpose", one(u({3, 5})), [](Tape&, V x) { return transpose(x[0]); }});
    cs.push_back({"concat", two(u({2, 3}), u({2, 2})), [](Tape&, V x) { return concat({x[0], x[1]}, 1); }});
    cs.push_back({"slice", one(u({4, 3})), [](Tape&, V x) { return slice(x[0], 0, 1, 3); }});
    cs.push_back({"gather_rows", one(u({4, 3})), [](Tape&, V x) { return gather_rows(x[0], {2, 0, 2, 3}); }});
    cs.push_back({"add", two(u({3, 4}), u({3, 4})), [](Tape&, V x) { return add(x[0], x[1]); }});
    cs.push_back({"sub", two(u({3, 4}), u({3, 4})), [](Tape&, V x) { return sub(x[0], x[1]); }});
    cs.push_back({"mul", two(u({3, 4}), u({3, 4})), [](Tape&, V x) { return mul(x[0], x[1]); }});
    cs.push_back({"scale", one(u({3, 4})), [](Tape&, V x) { return scale(x[0], -1.7); }});
    cs.push_back({"add_scalar", one(u({3, 4})), [](Tape&, V x) { return add_scalar(x[0], 0.3); }});
    cs.push_back({"add_bias", two(u({2, 3, 4}), u({4})), [](Tape&, V x) { return add_bias(x[0], x[1]); }});
    cs.push_back({"square", one(u({3, 4})), [](Tape&, V x) { return square(x[0]); }});
    cs.push_back({"sqrt", one(u({3, 4}, 0.5, 3.0)), [](Tape&, V x) { return sqrt(x[0]); }});
    cs.push_back({"sum", one(u({3, 4})), [](Tape&, V x) { return sum(x[0]); }});
    cs.push_back({"mean", one(u({3, 4})), [](Tape&, V x) { return mean(x[0]); }});
    cs.push_back({"mean_axis", one(u({2, 3, 4})), [](Tape&, V x) { return mean_axis(x[0], 1); }});
    cs.push_back({"relu", one([](std::mt19937_64& r) { return away_from_zero({3, 4}, r, -2, 2, 1e-3); }),
                  [](Tape&, V x) { return relu(x[0]); }});
    cs.push_back({"leaky_relu", one([](std::mt19937_64& r) { return away_from_zero({3, 4}, r, -2, 2, 1e-3); }),
                  [](Tape&, V x) { return leaky_relu(x[0], 0.2); }});
    cs.push_back({"sigmoid", one(u({3, 4}, -4, 4)), [](Tape&, V x) { return sigmoid(x[0]); }});
    cs.push_back({"softmax", one(u({2, 3, 4})), [](Tape&, V x) { return softmax(x[0], 1); }});
    cs.push_back({"masked_softmax", one(u({3, 4})), [](Tape&, V x) {
                      Tensor mask({3, 4}, 1.0);
                      for (std::size_t i = 0; i < 3; ++i)
                          for (std::size_t j = i + 2; j < 4; ++j) mask(i, j) = 0.0;
                      return masked_softmax(x[0], mask, 1);
                  }});
    cs.push_back({"layer_norm", [](std::mt19937_64& r) { return T{uniform_tensor({3, 5}, r, -2, 2), uniform_tensor({5}, r, 0.5, 1.5),
                                                                   uniform_tensor({5}, r, -1, 1)}; },
                  [](Tape&, V x) { return layer_norm(x[0], x[1], x[2], 1e-5); }});
    cs.push_back({"fully_connected", [](std::mt19937_64& r) { return T{uniform_tensor({2, 3, 4}, r, -2, 2), uniform_tensor({4, 3}, r, -1, 1),
                                                                        uniform_tensor({3}, r, -1, 1)}; },
                  [](Tape&, V x) { return fully_connected(x[0], x[1], x[2], 0.2); }});
    cs.push_back({"cheb_conv", [](std::mt19937_64& r) { return T{uniform_tensor({2, 5, 3}, r, -2, 2), uniform_tensor({3, 2}, r, -1, 1),
                                                                  uniform_tensor({3, 2}, r, -1, 1), uniform_tensor({3, 2}, r, -1, 1)}; },
                  [](Tape&, V x) {
                      // A fixed 5-node path graph; the coefficients and signal vary.
                      Tensor w({5, 5}, 0.0);
                      for (std::size_t i = 0; i + 1 < 5; ++i) w(i, i + 1) = w(i + 1, i) = 0.5 + 0.1 * static_cast<double>(i);
                      const SpectralOperator op = make_spectral_operator(w);
                      return cheb_conv(op.scaled_laplacian, x[0], {x[1], x[2], x[3]});
                  }});
    cs.push_back({"rmse_loss", two(u({3, 4}), u({3, 4})), [](Tape&, V x) { return rmse_loss(x[0], x[1]); }});
    return cs;
}

inline GradSuiteEntry to_entry(const std::string& name, const GradCheckReport& r, std::size_t checks) {
    return {name, checks, r.worst(), r.passed()};
}

} // namespace detail

/// Each primitive: `trials` random draws, scalar loss sum(out * R) for a
/// random R, every input scalar perturbed.
inline GradSuiteReport check_primitives(const GradSuiteOptions& opt = {}) {
    GradSuiteReport report;
    report.scope = GradScope::primitives;
    report.tolerance = grad_tolerance(GradScope::primitives);
    std::mt19937_64 rng(opt.seed);
    for (const auto& pc : gacan::detail::primitive_cases()) {
        GradSuiteEntry entry{pc.name, 0, 0.0, true};
        for (std::size_t trial = 0; trial < opt.trials; ++trial) {
            const std::vector<Tensor> inputs = pc.inputs(rng);
            ParameterStore store;
            for (std::size_t i = 0; i < inputs.size(); ++i) store.add("in" + std::to_string(i), inputs[i]);
            Tensor weights;
            {
                ad::Tape probe;
                std::vector<ad::Var> xs;
                for (std::size_t i = 0; i < inputs.size(); ++i) xs.push_back(probe.constant(inputs[i]));
                weights = gacan::detail::uniform_tensor(pc.build(probe, xs).shape(), rng, -1.0, 1.0);
            }
            const bool corrupt = opt.corrupt;
            const LossFn loss = [&](ad::Tape& tape, ParameterStore& s) {
                std::vector<ad::Var> xs;
                for (std::size_t i = 0; i < inputs.size(); ++i) xs.push_back(tape.parameter(s, "in" + std::to_string(i)));
                ad::Var out = pc.build(tape, xs);
                if (corrupt) out = gacan::detail::skewed_identity(out);
                return ad::sum(ad::mul(out, tape.constant(weights)));
            };
            const GradCheckReport r = grad_check(loss, store, opt.step, report.tolerance);
            entry.checks += 1;
            entry.worst = std::max(entry.worst, r.worst());
            entry.pass = entry.pass && r.passed();
        }
        report.entries.push_back(entry);
    }
    return report;
}

/// First ACA block of `config` on random streams and a random line graph.
inline GradSuiteReport check_block(const ModelConfig& config = gradcheck_toy_config(), const GradSuiteOptions& opt = {}) {
    std::mt19937_64 rng(opt.seed);
    GacanModel m = init_model(config);
    const SpectralOperator op = gacan::detail::random_line_operator(config.n_nodes, rng);
    const StreamSet s = gacan::detail::random_streams(config, rng);
    Tensor weights;
    {
        ad::Tape probe;
        weights = gacan::detail::uniform_tensor(aca_forward(probe, m, 0, &s, nullptr, op).shape(), rng, -1.0, 1.0);
    }
    const LossFn loss = [&](ad::Tape& tape, ParameterStore&) {
        ad::Var out = aca_forward(tape, m, 0, &s, nullptr, op);
        if (opt.corrupt) out = gacan::detail::skewed_identity(out);
        return ad::sum(ad::mul(out, tape.constant(weights)));
    };
    GradSuiteReport report;
    report.scope = GradScope::block;
    report.tolerance = grad_tolerance(GradScope::block);
    for (const auto& e : grad_check(loss, m.params, opt.step, report.tolerance).entries) {
        report.entries.push_back({e.name, 1, e.max_rel_error, e.pass});
    }
    return report;
}

/// End-to-end RMSE loss of the whole model against a random target. When
/// `params` is given the check runs at those parameter values.
inline GradSuiteReport check_model(const ModelConfig& config = gradcheck_toy_config(), const GradSuiteOptions& opt = {},
                                   const ParameterStore* params = nullptr) {
    std::mt19937_64 rng(opt.seed);
    GacanModel m = init_model(config);
    if (params) {
        if (params->names() != m.params.names()) throw ValidationError("parameters do not match the model config");
        for (const auto& [name, e] : *params) m.params.value(name) = e.value;
    }
    const SpectralOperator op = gacan::detail::random_line_operator(config.n_nodes, rng);
    const StreamSet s = gacan::detail::random_streams(config, rng);
    const Tensor truth = gacan::detail::uniform_tensor({config.horizon, config.n_nodes}, rng, -2.0, 2.0);
    const LossFn loss = [&](ad::Tape& tape, ParameterStore&) {
        ad::Var out = model_forward(tape, m, op, s);
        if (opt.corrupt) out = gacan::detail::skewed_identity(out);
        return rmse_loss(out, tape.constant(truth));
    };
    GradSuiteReport report;
    report.scope = GradScope::model;
    report.tolerance = grad_tolerance(GradScope::model);
    for (const auto& e : grad_check(loss, m.params, opt.step, report.tolerance).entries) {
        report.entries.push_back({e.name, 1, e.max_rel_error, e.pass});
    }
    return report;
}

inline GradSuiteReport run_grad_suite(GradScope scope, const ModelConfig& config = gradcheck_toy_config(),
                                      const GradSuiteOptions& opt = {}) {
    switch (scope) {
    case GradScope::primitives: return check_primitives(opt);
    case GradScope::block: return check_block(config, opt);
    case GradScope::model: return check_model(config, opt);
    }
    return {};
}

} // namespace gacan
