#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "icount/counter.hpp"

using namespace icount;

namespace {

// Recorded from the first build.
constexpr double kGoldenTotal = 21.558418378115768;

ToyCounter random_counter(std::mt19937_64& rng, int C, int h, int w, int U) {
    std::normal_distribution<double> n(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ToyCounter tc;
    tc.features = FeatureMap(C, h, w);
    for (auto& v : tc.features.values) v = u(rng) * 2.0 - 0.3;
    auto& hw = tc.weights;
    hw.channels = C;
    hw.upsample = U;
    hw.conv1_w.resize(std::size_t(C) * C * 9);
    for (auto& v : hw.conv1_w) v = 0.3 * n(rng);
    hw.conv1_b.resize(C);
    for (auto& v : hw.conv1_b) v = 0.1 * n(rng);
    hw.proj_w.resize(C);
    for (auto& v : hw.proj_w) v = n(rng);
    hw.proj_b = 0.2;
    return tc;
}

RefinementParams jittered(std::mt19937_64& rng, const ToyCounter& tc, double amount) {
    std::normal_distribution<double> n(0.0, amount);
    auto p = tc.identity_params();
    for (auto b : p.blocks())
        for (auto& v : b) v += n(rng);
    return p;
}

double dot(const DensityGrid& a, const DensityGrid& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

template <class V>
bool same_signs(const V& a, const V& b) {
    for (std::size_t i = 0; i < a.size(); ++i)
        if ((a[i] > 0.0) != (b[i] > 0.0)) return false;
    return true;
}

bool same_gates(const ForwardTrace& a, const ForwardTrace& b) {
    return same_signs(a.refined.values, b.refined.values) && same_signs(a.conv.values, b.conv.values) &&
           same_signs(a.proj, b.proj);
}

DotScene scene_of(int h, int w, int n, std::uint64_t seed, double margin = 8.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> uy(margin, h - margin), ux(margin, w - margin);
    DotScene s{h, w, 2.0, {}};
    for (int i = 0; i < n; ++i) s.dots.push_back({ux(rng), uy(rng)});
    return s;
}

}  // namespace

TEST(Refine, IdentityIsBitExact) {
    std::mt19937_64 rng(1);
    const auto tc = random_counter(rng, 6, 16, 16, 1);
    EXPECT_EQ(refine(tc.features, tc.identity_params()), tc.features);
}

TEST(Refine, ChannelScaleTwoDoubles) {
    std::mt19937_64 rng(2);
    const auto tc = random_counter(rng, 4, 8, 8, 1);
    auto p = tc.identity_params();
    std::fill(p.ch_scale.begin(), p.ch_scale.end(), 2.0);
    const auto out = refine(tc.features, p);
    for (std::size_t k = 0; k < out.values.size(); ++k) EXPECT_EQ(out.values[k], 2.0 * tc.features.values[k]);
}

TEST(Refine, PerChannelScaleAndBias) {
    const FeatureMap f(5, 8, 8, 1.0);
    auto p = RefinementParams::identity(5, 8, 8);
    for (int c = 0; c < 5; ++c) p.ch_scale[c] = c + 1, p.ch_bias[c] = 1.0;
    const auto out = refine(f, p);
    for (int c = 0; c < 5; ++c)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) EXPECT_EQ(out.at(c, y, x), c + 2.0);
}

TEST(Refine, ShapeMismatchIsRejected) {
    const FeatureMap f(2, 4, 4);
    EXPECT_THROW(refine(f, RefinementParams::identity(3, 4, 4)), std::logic_error);
    EXPECT_THROW(refine(f, RefinementParams::identity(2, 4, 5)), std::logic_error);
}

TEST(Refine, AffineInEachBlock) {
    std::mt19937_64 rng(3);
    const auto tc = random_counter(rng, 3, 6, 7, 1);
    const auto base = jittered(rng, tc, 0.3);
    for (int b = 0; b < 4; ++b) {
        auto p1 = base, p2 = base, p12 = base, p0 = base;
        std::normal_distribution<double> n(0.0, 1.0);
        auto b0 = p0.blocks()[b], b1 = p1.blocks()[b], b2 = p2.blocks()[b], b12 = p12.blocks()[b];
        for (std::size_t i = 0; i < b0.size(); ++i) {
            const double d1 = n(rng), d2 = n(rng);
            b0[i] = 0.0;
            b1[i] = d1;
            b2[i] = d2;
            b12[i] = d1 + d2;
        }
        const auto r0 = refine(tc.features, p0), r1 = refine(tc.features, p1), r2 = refine(tc.features, p2),
                   r12 = refine(tc.features, p12);
        for (std::size_t k = 0; k < r0.values.size(); ++k)
            EXPECT_NEAR(r12.values[k] - r0.values[k], (r1.values[k] - r0.values[k]) + (r2.values[k] - r0.values[k]),
                        1e-12)
                << kBlockNames[b];
    }
}

TEST(Forward, ZeroFeaturesAndBiasesGiveZero) {
    std::mt19937_64 rng(4);
    auto tc = random_counter(rng, 6, 8, 8, 2);
    std::fill(tc.features.values.begin(), tc.features.values.end(), 0.0);
    std::fill(tc.weights.conv1_b.begin(), tc.weights.conv1_b.end(), 0.0);
    tc.weights.proj_b = 0.0;
    const auto d = tc.forward(tc.identity_params());
    EXPECT_EQ(d.height(), 16);
    EXPECT_EQ(d.total(), 0.0);
}

TEST(Forward, OutputIsNonNegative) {
    std::mt19937_64 rng(5);
    for (int i = 0; i < 10; ++i) {
        const auto tc = random_counter(rng, 4, 10, 12, i % 2 ? 2 : 1);
        const auto d = tc.forward(jittered(rng, tc, 0.5));
        for (double v : d.values()) EXPECT_GE(v, 0.0);
    }
}

TEST(Forward, ChannelScaleTwoOnAPositivePath) {
    std::mt19937_64 rng(6);
    auto tc = random_counter(rng, 6, 12, 12, 2);
    for (auto& v : tc.features.values) v = std::abs(v) + 0.1;
    for (auto& v : tc.weights.conv1_w) v = std::abs(v);
    for (auto& v : tc.weights.proj_w) v = std::abs(v);
    std::fill(tc.weights.conv1_b.begin(), tc.weights.conv1_b.end(), 0.0);
    tc.weights.proj_b = 0.0;
    auto p2 = tc.identity_params();
    std::fill(p2.ch_scale.begin(), p2.ch_scale.end(), 2.0);
    const double t1 = tc.forward(tc.identity_params()).total(), t2 = tc.forward(p2).total();
    EXPECT_GE(t2, t1);
    EXPECT_NEAR(t2, 2.0 * t1, 1e-9 * t1);
}

TEST(Backward, ZeroUpstreamGivesZeroGradients) {
    std::mt19937_64 rng(7);
    const auto tc = random_counter(rng, 6, 8, 8, 2);
    const auto g = tc.backward(jittered(rng, tc, 0.2), DensityGrid(16, 16));
    for (auto b : g.blocks())
        for (double v : b) EXPECT_EQ(v, 0.0);
}

TEST(Backward, RejectsWrongGradientShape) {
    std::mt19937_64 rng(8);
    const auto tc = random_counter(rng, 2, 8, 8, 2);
    EXPECT_THROW(tc.backward(tc.identity_params(), DensityGrid(8, 8)), std::logic_error);
}

// Central differences on L = <G, D>; samples whose perturbation flips a ReLU gate are skipped.
TEST(Backward, MatchesCentralFiniteDifferences) {
    std::mt19937_64 rng(2024);
    constexpr double step = 1e-4;
    int fixtures = 0, checked = 0, skipped = 0;
    double worst = 0.0;
    for (int trial = 0; trial < 24; ++trial) {
        const int U = trial % 3 == 0 ? 2 : 1;
        const auto tc = random_counter(rng, 6, 16, 16, U);
        const auto params = jittered(rng, tc, 0.2);
        DensityGrid G(tc.out_height(), tc.out_width());
        std::normal_distribution<double> n(0.0, 1.0);
        for (auto& v : G.values()) v = n(rng);
        const auto base = tc.trace(params);
        const auto grad = tc.backward(params, base, G);
        ++fixtures;
        for (int b = 0; b < 4; ++b) {
            const auto size = params.blocks()[b].size();
            // Every channel entry, and a sample of spatial cells.
            std::vector<std::size_t> indices;
            std::uniform_int_distribution<std::size_t> pick(0, size - 1);
            for (std::size_t s = 0; s < std::min<std::size_t>(size, 12); ++s) indices.push_back(size <= 12 ? s : pick(rng));
            for (const auto i : indices) {
                auto plus = params, minus = params;
                plus.blocks()[b][i] += step;
                minus.blocks()[b][i] -= step;
                const auto tp = tc.trace(plus), tm = tc.trace(minus);
                if (!same_gates(base, tp) || !same_gates(base, tm)) {
                    ++skipped;
                    continue;
                }
                const double numeric = (dot(G, tp.density) - dot(G, tm.density)) / (2 * step);
                const double analytic = grad.blocks()[b][i];
                const double err = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-6});
                worst = std::max(worst, err);
                ++checked;
                EXPECT_LT(err, 1e-3) << kBlockNames[b] << "[" << i << "] trial " << trial << " analytic " << analytic
                                     << " numeric " << numeric;
            }
        }
    }
    EXPECT_GE(fixtures, 20);
    EXPECT_GT(checked, 20 * 40);
    RecordProperty("worst_relative_error", std::to_string(worst));
    RecordProperty("skipped", skipped);
}

TEST(Backward, SpatialScaleComposesWithTheFeatures) {
    // With zero biases, scaling cell i by s_i equals feeding s_i * F with spatial identity.
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.5, 1.5);
    for (int trial = 0; trial < 10; ++trial) {
        auto tc = random_counter(rng, 2, 2, 2, 1);
        auto params = tc.identity_params();
        for (auto& v : params.ch_scale) v = u(rng);
        for (auto& v : params.sp_scale) v = u(rng);
        auto composed = tc;
        for (int c = 0; c < 2; ++c)
            for (std::size_t i = 0; i < 4; ++i) composed.features.values[c * 4 + i] *= params.sp_scale[i];
        auto spatial_identity = params;
        std::fill(spatial_identity.sp_scale.begin(), spatial_identity.sp_scale.end(), 1.0);
        DensityGrid G(2, 2);
        for (auto& v : G.values()) v = u(rng) - 1.0;
        const auto a = tc.backward(params, G), b = composed.backward(spatial_identity, G);
        for (int c = 0; c < 2; ++c) EXPECT_NEAR(a.ch_scale[c], b.ch_scale[c], 1e-12);
    }
}

TEST(Backward, ForwardAndBackwardAreDeterministic) {
    std::mt19937_64 rng(10);
    const auto tc = random_counter(rng, 6, 16, 16, 2);
    const auto p = jittered(rng, tc, 0.1);
    DensityGrid G(32, 32, 0.5);
    EXPECT_EQ(tc.forward(p), tc.forward(p));
    EXPECT_EQ(tc.backward(p, G), tc.backward(p, G));
}

TEST(Synthesize, CalibratedCounterMatchesTheDotCount) {
    const auto scene = scene_of(128, 128, 20, 1);
    for (int U : {1, 2, 4}) {
        const auto tc = synthesize_counter(scene, Miscalibration::none(), CounterSpec{6, U, 25.0, 3});
        const double total = tc.forward(tc.identity_params()).total();
        EXPECT_GE(total, 19.0) << U;
        EXPECT_LE(total, 21.0) << U;
        EXPECT_EQ(tc.out_height(), 128);
    }
}

TEST(Synthesize, GlobalScaleTwoDoublesTheCount) {
    const auto scene = scene_of(128, 128, 20, 2);
    for (int U : {1, 4}) {
        const auto tc = synthesize_counter(scene, Miscalibration::global(2.0), CounterSpec{6, U, 25.0, 3});
        const double total = tc.forward(tc.identity_params()).total();
        EXPECT_GE(total, 36.0) << U;
        EXPECT_LE(total, 44.0) << U;
    }
}

TEST(Synthesize, BlobOnAnEmptySceneAddsItsMagnitudeNearTheCenter) {
    const DotScene scene{128, 128, 2.0, {}};
    for (int U : {1, 4}) {
        DensityGrid gt;
        const auto m = Miscalibration::blob(64.0, 50.0, 12.0, 2.5);
        const auto tc = synthesize_counter(scene, m, CounterSpec{6, U, 25.0, 0}, &gt);
        EXPECT_EQ(gt.total(), 0.0);
        const auto d = tc.forward(tc.identity_params());
        EXPECT_NEAR(d.total(), 2.5, 0.125) << U;
        double near = 0.0;
        for (int y = 0; y < 128; ++y)
            for (int x = 0; x < 128; ++x)
                if (std::hypot(x - 64.0, y - 50.0) <= 2 * m.radius) near += d.at(y, x);
        EXPECT_GE(near / d.total(), 0.9) << U;
    }
}

TEST(Synthesize, DeterministicForASeed) {
    const auto scene = scene_of(64, 64, 7, 3);
    const CounterSpec spec{6, 2, 25.0, 11};
    const auto a = synthesize_counter(scene, Miscalibration::global(1.5), spec);
    const auto b = synthesize_counter(scene, Miscalibration::global(1.5), spec);
    EXPECT_EQ(a.features, b.features);
    EXPECT_EQ(a.weights, b.weights);
    const auto c = synthesize_counter(scene, Miscalibration::global(1.5), CounterSpec{6, 2, 25.0, 12});
    EXPECT_NE(a.weights, c.weights);
}

TEST(Synthesize, RejectsBadInputs) {
    const DensityGrid g(30, 30);
    EXPECT_THROW(synthesize_counter(g, Miscalibration::none(), CounterSpec{6, 3, 25.0, 0}), std::invalid_argument);
    EXPECT_THROW(synthesize_counter(g, Miscalibration::none(), CounterSpec{6, 4, 25.0, 0}), std::invalid_argument);
    EXPECT_THROW(synthesize_counter(g, Miscalibration::global(0.0), CounterSpec{}), std::invalid_argument);
    EXPECT_THROW(synthesize_counter(g, Miscalibration::blob(1, 1, 0.0, 1), CounterSpec{}), std::invalid_argument);
}

TEST(Synthesize, GoldenTotal) {
    const auto scene = scene_of(96, 96, 13, 42);
    const auto tc = synthesize_counter(scene, Miscalibration::global(1.7), CounterSpec{6, 4, 25.0, 5});
    const double total = tc.forward(tc.identity_params()).total();
    RecordProperty("golden_total", std::to_string(total));
    EXPECT_NEAR(total, kGoldenTotal, 1e-9);
}
