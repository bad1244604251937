#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "gacan/attention.hpp"
#include "gacan/gradcheck.hpp"
#include "test_support.hpp"

using namespace gacan;
using namespace gacan::ad;
using gacan::testing::random_tensor;

namespace {

GranularityWindow window(std::size_t t, std::size_t n, std::size_t c, std::mt19937_64& rng,
                         Granularity g = Granularity::minute) {
    return {g, 1, random_tensor({t, n, c}, rng)};
}

ParameterStore attention_store(std::size_t c, std::size_t width, std::size_t heads, std::uint64_t seed = 1) {
    ParameterStore s;
    add_attention_params(s, "att", {c, width, heads}, seed);
    return s;
}

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

} // namespace

TEST(AttentionCoeffs, ZeroScoreWeightsGiveUniformRows) {
    std::mt19937_64 rng(1);
    ParameterStore s = attention_store(2, 2, 1);
    s.value("att.score.W").fill(0.0);
    const Tensor a = attention_coeffs(window(5, 3, 2, rng), s, "att");
    ASSERT_EQ(a.shape(), (Shape{5, 5, 3}));
    for (std::size_t t = 0; t < 5; ++t)
        for (std::size_t i = 0; i < 5; ++i)
            for (std::size_t q = 0; q < 3; ++q) EXPECT_NEAR(a(t, i, q), i <= t ? 1.0 / double(t + 1) : 0.0, 1e-15);
}

TEST(AttentionCoeffs, SinglePositionIsOne) {
    std::mt19937_64 rng(2);
    ParameterStore s = attention_store(1, 1, 1);
    const Tensor a = attention_coeffs(window(1, 4, 1, rng), s, "att");
    ASSERT_EQ(a.shape(), (Shape{1, 1, 4}));
    for (double v : a.values()) EXPECT_EQ(v, 1.0);
}

TEST(AttentionCoeffs, NodeMeanSharingGivesOneRowPerPosition) {
    std::mt19937_64 rng(3);
    ParameterStore s = attention_store(2, 2, 1);
    AttentionOptions opt;
    opt.sharing = ScoreSharing::node_mean;
    const GranularityWindow w = window(4, 3, 2, rng);
    const Tensor a = attention_coeffs(w, s, "att", opt);
    ASSERT_EQ(a.shape(), (Shape{4, 4}));

    // Independent recomputation: mean over nodes of leaky(FC([x_t || x_{t-i}])), then softmax.
    const Tensor& sw = s.value("att.score.W");
    const double sb = s.value("att.score.b")[0];
    for (std::size_t t = 0; t < 4; ++t) {
        std::vector<double> z;
        for (std::size_t i = 0; i <= t; ++i) {
            double m = 0;
            for (std::size_t q = 0; q < 3; ++q) {
                double v = sb;
                for (std::size_t c = 0; c < 2; ++c) v += w.data(t, q, c) * sw(c, 0) + w.data(t - i, q, c) * sw(2 + c, 0);
                m += v >= 0 ? v : 0.2 * v;
            }
            z.push_back(m / 3.0);
        }
        double den = 0;
        for (double v : z) den += std::exp(v);
        for (std::size_t i = 0; i <= t; ++i) EXPECT_NEAR(a(t, i), std::exp(z[i]) / den, 1e-14);
        for (std::size_t i = t + 1; i < 4; ++i) EXPECT_EQ(a(t, i), 0.0);
    }
}

TEST(AttentionCoeffs, RowsAreDistributionsOnRandomWindows) {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<std::size_t> len(1, 8), nodes(1, 5), chans(1, 3), step(1, 3);
    double worst = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const auto g = all_granularities[trial % 4];
        const std::size_t c = chans(rng);
        ParameterStore s = attention_store(c, 1, 1, static_cast<std::uint64_t>(trial));
        for (auto& v : s.value("att.score.W").raw()) v *= 5.0;
        AttentionOptions opt;
        opt.lag_step = step(rng);
        opt.sharing = trial % 2 ? ScoreSharing::per_node : ScoreSharing::node_mean;
        const GranularityWindow w{g, std::size_t{1} << static_cast<int>(g), random_tensor({len(rng), nodes(rng), c}, rng, -10, 10)};
        const Tensor a = attention_coeffs(w, s, "att", opt);
        const std::size_t cols = a.rank() == 3 ? a.dim(2) : 1;
        for (std::size_t t = 0; t < a.dim(0); ++t)
            for (std::size_t q = 0; q < cols; ++q) {
                double sum = 0;
                for (std::size_t i = 0; i < a.dim(1); ++i) {
                    const double v = a.rank() == 3 ? a(t, i, q) : a(t, i);
                    EXPECT_GE(v, 0.0);
                    if (i * opt.lag_step > t) {
                        EXPECT_EQ(v, 0.0);
                    }
                    sum += v;
                }
                worst = std::max(worst, std::abs(sum - 1.0));
            }
    }
    EXPECT_LE(worst, 1e-12);
}

TEST(AttentionCoeffs, LagLayoutHonoursStepAndCap) {
    const LagLayout lay = make_lag_layout(7, 3, 0);
    EXPECT_EQ(lay.lags, 3u);
    EXPECT_EQ(lay.mask(1, 1), 0.0);
    EXPECT_EQ(lay.mask(3, 1), 1.0);
    EXPECT_EQ(lay.mask(6, 2), 1.0);
    EXPECT_EQ(lay.lagged[6 * 3 + 2], 0u);
    EXPECT_EQ(make_lag_layout(7, 1, 2).lags, 2u);
    EXPECT_THROW(make_lag_layout(0, 1, 0), ValidationError);
}

TEST(TemporalMa, SelfOnlyAttentionIsSigmoidOfInput) {
    std::mt19937_64 rng(5);
    ParameterStore s = attention_store(2, 2, 1);
    s.value("att.head0.W") = Tensor::identity(2);
    AttentionOptions opt;
    opt.max_lags = 1;
    const GranularityWindow w = window(4, 3, 2, rng);
    const Tensor h = temporal_ma(w, s, "att", 1, opt);
    ASSERT_EQ(h.shape(), w.data.shape());
    for (std::size_t i = 0; i < h.size(); ++i) EXPECT_NEAR(h[i], sigmoid(w.data[i]), 1e-15);

    opt.activation = false;
    EXPECT_EQ(temporal_ma(w, s, "att", 1, opt), w.data);
}

TEST(TemporalMa, IdenticalHeadsGiveIdenticalBlocks) {
    std::mt19937_64 rng(6);
    ParameterStore s = attention_store(2, 3, 2);
    s.value("att.head1.W") = s.value("att.head0.W");
    const Tensor h = temporal_ma(window(5, 4, 2, rng), s, "att", 2);
    ASSERT_EQ(h.shape(), (Shape{5, 4, 6}));
    for (std::size_t t = 0; t < 5; ++t)
        for (std::size_t q = 0; q < 4; ++q)
            for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(h(t, q, c), h(t, q, c + 3));
}

TEST(TemporalMa, MatchesDirectEvaluation) {
    std::mt19937_64 rng(7);
    const std::size_t t = 6, n = 3, c = 2, width = 2, heads = 2;
    ParameterStore s = attention_store(c, width, heads);
    AttentionOptions opt;
    opt.lag_step = 2;
    const GranularityWindow w = window(t, n, c, rng);
    const Tensor a = attention_coeffs(w, s, "att", opt);
    const Tensor h = temporal_ma(w, s, "att", heads, opt);
    for (std::size_t p = 0; p < t; ++p)
        for (std::size_t q = 0; q < n; ++q)
            for (std::size_t k = 0; k < heads; ++k) {
                const Tensor& wk = s.value(head_param("att", k));
                for (std::size_t o = 0; o < width; ++o) {
                    double z = 0;
                    for (std::size_t i = 0; i * 2 <= p; ++i)
                        for (std::size_t ci = 0; ci < c; ++ci) z += a(p, i, q) * w.data(p - 2 * i, q, ci) * wk(ci, o);
                    EXPECT_NEAR(h(p, q, k * width + o), sigmoid(z), 1e-14);
                }
            }
}

TEST(TemporalMa, NodePermutationEquivariance) {
    std::mt19937_64 rng(8);
    ParameterStore s = attention_store(1, 1, 2);
    const GranularityWindow w = window(5, 4, 1, rng);
    const std::vector<std::size_t> perm{2, 0, 3, 1};
    GranularityWindow pw = w;
    for (std::size_t t = 0; t < 5; ++t)
        for (std::size_t q = 0; q < 4; ++q) pw.data(t, q, 0) = w.data(t, perm[q], 0);
    for (auto sharing : {ScoreSharing::per_node, ScoreSharing::node_mean}) {
        AttentionOptions opt;
        opt.sharing = sharing;
        const Tensor h = temporal_ma(w, s, "att", 2, opt);
        const Tensor ph = temporal_ma(pw, s, "att", 2, opt);
        for (std::size_t t = 0; t < 5; ++t)
            for (std::size_t q = 0; q < 4; ++q)
                for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(ph(t, q, c), h(t, perm[q], c), 1e-14);
    }
}

TEST(TemporalMa, PerNodeSharingKeepsNodesIndependent) {
    std::mt19937_64 rng(9);
    ParameterStore s = attention_store(2, 2, 2);
    GranularityWindow w = window(5, 4, 2, rng);
    const Tensor base = temporal_ma(w, s, "att", 2);
    w.data(2, 1, 0) += 1.0;
    const Tensor moved = temporal_ma(w, s, "att", 2);
    for (std::size_t t = 0; t < 5; ++t)
        for (std::size_t q = 0; q < 4; ++q)
            for (std::size_t c = 0; c < 4; ++c)
                if (q != 1) {
                    EXPECT_EQ(moved(t, q, c), base(t, q, c));
                }
}

TEST(TemporalMa, CausalInTime) {
    std::mt19937_64 rng(10);
    ParameterStore s = attention_store(2, 2, 1);
    GranularityWindow w = window(6, 3, 2, rng);
    const Tensor base = temporal_ma(w, s, "att", 1);
    w.data(4, 0, 1) -= 2.0;
    const Tensor moved = temporal_ma(w, s, "att", 1);
    for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t q = 0; q < 3; ++q)
            for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(moved(t, q, c), base(t, q, c));
}

TEST(TemporalMa, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(11);
    for (auto sharing : {ScoreSharing::per_node, ScoreSharing::node_mean}) {
        ParameterStore s = attention_store(2, 2, 2);
        const Tensor x = random_tensor({4, 3, 2}, rng);
        AttentionOptions opt;
        opt.sharing = sharing;
        auto loss = [&](Tape& tape, ParameterStore& st) {
            return sum(square(temporal_ma(tape, st, "att", tape.constant(x), 2, opt)));
        };
        const auto report = grad_check(loss, s, 1e-6, 1e-5);
        EXPECT_TRUE(report.passed()) << report.worst();
    }
}

TEST(TemporalMa, ShapeErrors) {
    ParameterStore s = attention_store(2, 2, 1);
    Tape tape;
    EXPECT_THROW(temporal_ma(tape, s, "att", tape.constant(Tensor({3, 2})), 1), DimensionError);
    EXPECT_THROW(temporal_ma(tape, s, "att", tape.constant(Tensor({3, 2, 3})), 1), DimensionError);
    EXPECT_THROW(temporal_ma(tape, s, "att", tape.constant(Tensor({3, 2, 2})), 0), ValidationError);
}

namespace {

std::vector<FusionSlot> four_slots(std::size_t len) {
    return {{"m", len}, {"h", len}, {"d", len}, {"w", len}};
}

} // namespace

TEST(Fuse, AveragingIdenticalStreamsPassesThroughLeaky) {
    std::mt19937_64 rng(12);
    ParameterStore s;
    add_fusion_params(s, "f", four_slots(3), 2, 3, 2, 1);
    Tensor& w = s.value("f.fuse.W");
    w.fill(0.0);
    for (std::size_t slot = 0; slot < 4; ++slot)
        for (std::size_t c = 0; c < 2; ++c) w(slot * 2 + c, c) = 0.25;
    const Tensor x = random_tensor({3, 4, 2}, rng);
    Tape tape;
    auto v = tape.constant(x);
    const Tensor y = fuse(tape, s, "f", four_slots(3), {v, v, v, v}, 3).value();
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i] >= 0 ? x[i] : 0.2 * x[i], 1e-15);
}

TEST(Fuse, ZeroWeightsGiveBias) {
    std::mt19937_64 rng(13);
    ParameterStore s;
    add_fusion_params(s, "f", four_slots(5), 2, 3, 2, 1);
    s.value("f.fuse.W").fill(0.0);
    s.value("f.fuse.b") = Tensor::vector({0.7, -1.5});
    Tape tape;
    std::vector<std::optional<Var>> streams;
    for (int i = 0; i < 4; ++i) streams.emplace_back(tape.constant(random_tensor({5, 4, 2}, rng)));
    FuseOptions opt;
    opt.activation = false;
    const Tensor y = fuse(tape, s, "f", four_slots(5), streams, 3, opt).value();
    ASSERT_EQ(y.shape(), (Shape{3, 4, 2}));
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t q = 0; q < 4; ++q) {
            EXPECT_EQ(y(t, q, 0), 0.7);
            EXPECT_EQ(y(t, q, 1), -1.5);
        }
}

TEST(Fuse, MissingStreamsAreInertPadding) {
    std::mt19937_64 rng(14);
    ParameterStore s;
    const auto slots = four_slots(4);
    add_fusion_params(s, "f", slots, 2, 2, 3, 1);
    Tape tape;
    const Tensor xm = random_tensor({4, 3, 2}, rng);
    const Tensor only_m = fuse(tape, s, "f", slots, {tape.constant(xm), std::nullopt, std::nullopt, std::nullopt}, 2).value();
    const Tensor zeros = fuse(tape, s, "f", slots,
                              {tape.constant(xm), tape.constant(Tensor({4, 3, 2}, 0.0)),
                               tape.constant(Tensor({4, 3, 2}, 0.0)), tape.constant(Tensor({4, 3, 2}, 0.0))},
                              2)
                             .value();
    EXPECT_EQ(only_m, zeros);

    // Weights attached to the padded slots cannot influence the result.
    ParameterStore s2 = s;
    Tensor& w = s2.value("f.fuse.W");
    for (std::size_t r = 2; r < 8; ++r)
        for (std::size_t c = 0; c < 3; ++c) w(r, c) += 3.0;
    for (const char* slot : {"h", "d", "w"}) s2.value(align_param("f", slot)).fill(9.0);
    Tape tape2;
    EXPECT_EQ(fuse(tape2, s2, "f", slots, {tape2.constant(xm), std::nullopt, std::nullopt, std::nullopt}, 2).value(), only_m);
}

TEST(Fuse, LinearInEachStreamBeforeActivation) {
    std::mt19937_64 rng(15);
    ParameterStore s;
    const auto slots = four_slots(3);
    add_fusion_params(s, "f", slots, 2, 2, 2, 3);
    s.value("f.fuse.b").fill(0.0);
    FuseOptions opt;
    opt.activation = false;
    std::vector<Tensor> a, b;
    for (int i = 0; i < 4; ++i) {
        a.push_back(random_tensor({3, 2, 2}, rng));
        b.push_back(random_tensor({3, 2, 2}, rng));
    }
    auto run = [&](const std::vector<Tensor>& xs) {
        Tape tape;
        std::vector<std::optional<Var>> v;
        for (const auto& x : xs) v.emplace_back(tape.constant(x));
        return fuse(tape, s, "f", slots, v, 2, opt).value();
    };
    std::vector<Tensor> mix;
    for (int i = 0; i < 4; ++i) {
        Tensor m(a[i].shape());
        for (std::size_t j = 0; j < m.size(); ++j) m[j] = 2.0 * a[i][j] - 0.5 * b[i][j];
        mix.push_back(m);
    }
    const Tensor ya = run(a), yb = run(b), ym = run(mix);
    for (std::size_t j = 0; j < ym.size(); ++j) EXPECT_NEAR(ym[j], 2.0 * ya[j] - 0.5 * yb[j], 1e-10);
}

TEST(Fuse, AlignmentKeepsConstantStreamsConstant) {
    ParameterStore s;
    const std::vector<FusionSlot> slots{{"m", 6}};
    add_fusion_params(s, "f", slots, 1, 2, 1, 4);
    Tape tape;
    Tensor x({6, 3, 1});
    for (std::size_t t = 0; t < 6; ++t)
        for (std::size_t q = 0; q < 3; ++q) x(t, q, 0) = double(q) + 1.0;
    const Tensor aligned = align_stream(tape, s, "f", "m", tape.constant(x), 2).value();
    for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t q = 0; q < 3; ++q) EXPECT_NEAR(aligned(t, q, 0), double(q) + 1.0, 1e-14);
}

TEST(Fuse, Errors) {
    ParameterStore s;
    add_fusion_params(s, "f", four_slots(2), 2, 2, 2, 1);
    Tape tape;
    EXPECT_THROW(fuse(tape, s, "f", four_slots(2), {std::nullopt, std::nullopt, std::nullopt, std::nullopt}, 2),
                 ValidationError);
    EXPECT_THROW(fuse(tape, s, "f", {}, {}, 2), ValidationError);
    EXPECT_THROW(add_fusion_params(s, "g", {}, 2, 2, 2, 1), ValidationError);
}

TEST(AttentionPipeline, EndToEndGradient) {
    std::mt19937_64 rng(16);
    ParameterStore s;
    const std::vector<FusionSlot> slots{{"m", 4}, {"h", 3}, {"d", 2}, {"w", 2}};
    for (const auto& slot : slots) add_attention_params(s, "att." + slot.name, {2, 2, 2}, 5);
    add_fusion_params(s, "fuse", slots, 4, 2, 3, 5);
    std::vector<Tensor> xs;
    for (const auto& slot : slots) xs.push_back(random_tensor({slot.length, 3, 2}, rng));
    auto loss = [&](Tape& tape, ParameterStore& st) {
        std::vector<std::optional<Var>> streams;
        for (std::size_t i = 0; i < slots.size(); ++i) {
            streams.emplace_back(temporal_ma(tape, st, "att." + slots[i].name, tape.constant(xs[i]), 2));
        }
        return sum(square(fuse(tape, st, "fuse", slots, streams, 2)));
    };
    const auto report = grad_check(loss, s, 1e-6, 1e-4);
    EXPECT_TRUE(report.passed()) << report.worst();
}
