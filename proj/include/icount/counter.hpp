#pragma once

// Differentiable toy regression head with an affine refinement module.
//
// Pipeline after the refinement insertion point (F is the post-first-conv
// activation):
//   refine -> ReLU -> conv1 3x3 (zero pad) -> ReLU -> bilinear x U -> proj 1x1 -> ReLU

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "icount/grid.hpp"

namespace icount {

struct FeatureMap {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> values;  // [c][y][x]

    FeatureMap() = default;
    FeatureMap(int c, int h, int w, double fill = 0.0)
        : channels(c), height(h), width(w), values(std::size_t(c) * h * w, fill) {}

    std::size_t plane() const noexcept { return std::size_t(height) * width; }
    double& at(int c, int y, int x) { return values[std::size_t(c) * plane() + std::size_t(y) * width + x]; }
    double at(int c, int y, int x) const { return values[std::size_t(c) * plane() + std::size_t(y) * width + x]; }

    bool operator==(const FeatureMap&) const = default;
};

struct HeadWeights {
    int channels = 0;
    int upsample = 1;                // U in {1, 2, 4}
    std::vector<double> conv1_w;     // [out][in][3][3]
    std::vector<double> conv1_b;     // [out]
    std::vector<double> proj_w;      // [in]
    double proj_b = 0.0;

    double& w1(int o, int i, int ky, int kx) { return conv1_w[((std::size_t(o) * channels + i) * 3 + ky) * 3 + kx]; }
    double w1(int o, int i, int ky, int kx) const {
        return conv1_w[((std::size_t(o) * channels + i) * 3 + ky) * 3 + kx];
    }

    bool operator==(const HeadWeights&) const = default;
};

/// Per-channel and per-cell scale/bias. Also used as the gradient container.
struct RefinementParams {
    std::vector<double> ch_scale, ch_bias;  // [C]
    std::vector<double> sp_scale, sp_bias;  // [h * w]

    static RefinementParams identity(int channels, int height, int width) {
        const auto cells = std::size_t(height) * width;
        return {std::vector<double>(channels, 1.0), std::vector<double>(channels, 0.0),
                std::vector<double>(cells, 1.0), std::vector<double>(cells, 0.0)};
    }
    static RefinementParams zeros_like(const RefinementParams& p) {
        return {std::vector<double>(p.ch_scale.size(), 0.0), std::vector<double>(p.ch_bias.size(), 0.0),
                std::vector<double>(p.sp_scale.size(), 0.0), std::vector<double>(p.sp_bias.size(), 0.0)};
    }

    std::array<std::span<double>, 4> blocks() { return {ch_scale, ch_bias, sp_scale, sp_bias}; }
    std::array<std::span<const double>, 4> blocks() const { return {ch_scale, ch_bias, sp_scale, sp_bias}; }

    bool is_identity() const {
        for (double v : ch_scale) if (v != 1.0) return false;
        for (double v : sp_scale) if (v != 1.0) return false;
        for (double v : ch_bias) if (v != 0.0) return false;
        for (double v : sp_bias) if (v != 0.0) return false;
        return true;
    }

    bool operator==(const RefinementParams&) const = default;
};

inline constexpr std::array<const char*, 4> kBlockNames = {"ch_scale", "ch_bias", "sp_scale", "sp_bias"};

/// F' = R_sp(R_ch(F)).
inline FeatureMap refine(const FeatureMap& f, const RefinementParams& p) {
    if (p.ch_scale.size() != std::size_t(f.channels) || p.ch_bias.size() != std::size_t(f.channels) ||
        p.sp_scale.size() != f.plane() || p.sp_bias.size() != f.plane())
        throw std::logic_error("refine: parameter shape does not match feature map");
    FeatureMap out(f.channels, f.height, f.width);
    const auto plane = f.plane();
    for (int c = 0; c < f.channels; ++c)
        for (std::size_t i = 0; i < plane; ++i) {
            const auto k = std::size_t(c) * plane + i;
            out.values[k] = p.sp_scale[i] * (p.ch_scale[c] * f.values[k] + p.ch_bias[c]) + p.sp_bias[i];
        }
    return out;
}

namespace detail {

// Corner-aligned bilinear sampling taps along one axis.
struct Taps {
    std::vector<int> lo, hi;
    std::vector<double> frac;
};

inline Taps bilinear_taps(int in, int factor) {
    const int out = in * factor;
    Taps t;
    t.lo.resize(out);
    t.hi.resize(out);
    t.frac.resize(out);
    for (int o = 0; o < out; ++o) {
        double src = (in == 1 || out == 1) ? 0.0 : double(o) * (in - 1) / (out - 1);
        int lo = std::min(int(std::floor(src)), in - 1);
        t.lo[o] = lo;
        t.hi[o] = std::min(lo + 1, in - 1);
        t.frac[o] = src - lo;
    }
    return t;
}

}  // namespace detail

/// Intermediate activations of one forward pass.
struct ForwardTrace {
    FeatureMap refined;  // pre-ReLU refine output
    FeatureMap conv;     // pre-ReLU conv1 output
    FeatureMap upsampled;
    std::vector<double> proj;  // pre-ReLU projection, full resolution
    DensityGrid density;
};

/// A fixed feature map plus fixed head weights.
struct ToyCounter {
    FeatureMap features;
    HeadWeights weights;

    int out_height() const { return features.height * weights.upsample; }
    int out_width() const { return features.width * weights.upsample; }

    RefinementParams identity_params() const {
        return RefinementParams::identity(features.channels, features.height, features.width);
    }

    ForwardTrace trace(const RefinementParams& params) const {
        const auto& f = features;
        const auto& w = weights;
        const int C = f.channels, h = f.height, wd = f.width, U = w.upsample;
        ForwardTrace t;
        t.refined = refine(f, params);

        t.conv = FeatureMap(C, h, wd);
        for (int o = 0; o < C; ++o)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < wd; ++x) {
                    double acc = w.conv1_b[o];
                    for (int i = 0; i < C; ++i)
                        for (int ky = 0; ky < 3; ++ky) {
                            const int sy = y + ky - 1;
                            if (sy < 0 || sy >= h) continue;
                            for (int kx = 0; kx < 3; ++kx) {
                                const int sx = x + kx - 1;
                                if (sx < 0 || sx >= wd) continue;
                                acc += w.w1(o, i, ky, kx) * std::max(0.0, t.refined.at(i, sy, sx));
                            }
                        }
                    t.conv.at(o, y, x) = acc;
                }

        const int H = h * U, W = wd * U;
        if (U == 1) {
            t.upsampled = t.conv;
            for (auto& v : t.upsampled.values) v = std::max(0.0, v);
        } else {
            const auto ty = detail::bilinear_taps(h, U), tx = detail::bilinear_taps(wd, U);
            t.upsampled = FeatureMap(C, H, W);
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x) {
                        auto a = [&](int yy, int xx) { return std::max(0.0, t.conv.at(c, yy, xx)); };
                        const double fy = ty.frac[y], fx = tx.frac[x];
                        const double top = (1 - fx) * a(ty.lo[y], tx.lo[x]) + fx * a(ty.lo[y], tx.hi[x]);
                        const double bot = (1 - fx) * a(ty.hi[y], tx.lo[x]) + fx * a(ty.hi[y], tx.hi[x]);
                        t.upsampled.at(c, y, x) = (1 - fy) * top + fy * bot;
                    }
        }

        t.proj.assign(std::size_t(H) * W, w.proj_b);
        t.density = DensityGrid(H, W);
        const auto plane = t.upsampled.plane();
        for (int c = 0; c < C; ++c)
            for (std::size_t i = 0; i < plane; ++i) t.proj[i] += w.proj_w[c] * t.upsampled.values[c * plane + i];
        for (std::size_t i = 0; i < plane; ++i) t.density[i] = std::max(0.0, t.proj[i]);
        return t;
    }

    DensityGrid forward(const RefinementParams& params) const { return trace(params).density; }

    /// Reverse-mode gradients of a scalar loss w.r.t. the refinement parameters,
    /// given dLoss/dD on the output grid.
    RefinementParams backward(const RefinementParams& params, const DensityGrid& grad_density) const {
        return backward(params, trace(params), grad_density);
    }

    RefinementParams backward(const RefinementParams& params, const ForwardTrace& t,
                              const DensityGrid& grad_density) const {
        const auto& f = features;
        const auto& w = weights;
        const int C = f.channels, h = f.height, wd = f.width, U = w.upsample;
        const int H = h * U, W = wd * U;
        if (grad_density.height() != H || grad_density.width() != W)
            throw std::logic_error("backward: gradient shape does not match output");

        const std::size_t out_plane = std::size_t(H) * W;
        std::vector<double> g_proj(out_plane);
        for (std::size_t i = 0; i < out_plane; ++i) g_proj[i] = t.proj[i] > 0.0 ? grad_density[i] : 0.0;

        // d/d(conv output after ReLU), feature resolution
        FeatureMap g_act(C, h, wd);
        if (U == 1) {
            for (int c = 0; c < C; ++c)
                for (std::size_t i = 0; i < out_plane; ++i) g_act.values[c * out_plane + i] = w.proj_w[c] * g_proj[i];
        } else {
            const auto ty = detail::bilinear_taps(h, U), tx = detail::bilinear_taps(wd, U);
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H; ++y)
                    for (int x = 0; x < W; ++x) {
                        const double g = w.proj_w[c] * g_proj[std::size_t(y) * W + x];
                        if (g == 0.0) continue;
                        const double fy = ty.frac[y], fx = tx.frac[x];
                        g_act.at(c, ty.lo[y], tx.lo[x]) += g * (1 - fy) * (1 - fx);
                        g_act.at(c, ty.lo[y], tx.hi[x]) += g * (1 - fy) * fx;
                        g_act.at(c, ty.hi[y], tx.lo[x]) += g * fy * (1 - fx);
                        g_act.at(c, ty.hi[y], tx.hi[x]) += g * fy * fx;
                    }
        }

        FeatureMap g_conv(C, h, wd);
        for (std::size_t k = 0; k < g_conv.values.size(); ++k)
            g_conv.values[k] = t.conv.values[k] > 0.0 ? g_act.values[k] : 0.0;

        FeatureMap g_ref(C, h, wd);
        for (int o = 0; o < C; ++o)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < wd; ++x) {
                    const double g = g_conv.at(o, y, x);
                    if (g == 0.0) continue;
                    for (int i = 0; i < C; ++i)
                        for (int ky = 0; ky < 3; ++ky) {
                            const int sy = y + ky - 1;
                            if (sy < 0 || sy >= h) continue;
                            for (int kx = 0; kx < 3; ++kx) {
                                const int sx = x + kx - 1;
                                if (sx < 0 || sx >= wd) continue;
                                g_ref.at(i, sy, sx) += w.w1(o, i, ky, kx) * g;
                            }
                        }
                }
        for (std::size_t k = 0; k < g_ref.values.size(); ++k)
            if (!(t.refined.values[k] > 0.0)) g_ref.values[k] = 0.0;

        auto grad = RefinementParams::zeros_like(params);
        const auto plane = f.plane();
        for (int c = 0; c < C; ++c)
            for (std::size_t i = 0; i < plane; ++i) {
                const auto k = std::size_t(c) * plane + i;
                const double g = g_ref.values[k];
                if (g == 0.0) continue;
                const double inner = params.ch_scale[c] * f.values[k] + params.ch_bias[c];
                grad.sp_bias[i] += g;
                grad.sp_scale[i] += g * inner;
                grad.ch_scale[c] += g * params.sp_scale[i] * f.values[k];
                grad.ch_bias[c] += g * params.sp_scale[i];
            }
        return grad;
    }
};

struct Miscalibration {
    enum class Mode { none, global_scale, channel_scale, local_blob };
    Mode mode = Mode::none;
    double alpha = 1.0;                  // global_scale
    std::vector<double> channel_alpha;   // channel_scale
    double center_x = 0.0, center_y = 0.0, radius = 4.0, magnitude = 1.0;  // local_blob, full-res pixels

    static Miscalibration none() { return {}; }
    static Miscalibration global(double a) {
        Miscalibration m;
        m.mode = Mode::global_scale;
        m.alpha = a;
        return m;
    }
    static Miscalibration channels(std::vector<double> a) {
        Miscalibration m;
        m.mode = Mode::channel_scale;
        m.channel_alpha = std::move(a);
        return m;
    }
    static Miscalibration blob(double cx, double cy, double r, double mag) {
        Miscalibration m;
        m.mode = Mode::local_blob;
        m.center_x = cx;
        m.center_y = cy;
        m.radius = r;
        m.magnitude = mag;
        return m;
    }

    void validate() const {
        if (mode == Mode::global_scale && !(alpha > 0.0))
            throw std::invalid_argument("Miscalibration: alpha must be positive");
        if (mode == Mode::channel_scale)
            for (double a : channel_alpha)
                if (!(a > 0.0)) throw std::invalid_argument("Miscalibration: channel alphas must be positive");
        if (mode == Mode::local_blob && !(radius > 0.0))
            throw std::invalid_argument("Miscalibration: blob radius must be positive");
    }
};

struct CounterSpec {
    int channels = 6;
    int upsample = 1;
    double feature_gain = 25.0;  // feature magnitude per unit of full-resolution density
    std::uint64_t seed = 0;
};

/// Mass-`magnitude` Gaussian with sigma = radius / 2 centred on the blob position.
inline DensityGrid blob_density(int height, int width, const Miscalibration& m) {
    DotScene s{height, width, m.radius / 2.0, {{m.center_x, m.center_y}}};
    auto g = render_density(s);
    for (auto& v : g.values()) v *= m.magnitude;
    return g;
}

/// Builds F as blurred, gained copies of the ground truth and a head whose
/// projection inverts the known mixing, so the identity prediction carries the
/// ground-truth mass (exactly for mass away from the border).
inline ToyCounter synthesize_counter(const DensityGrid& ground_truth, const Miscalibration& miscal,
                                     const CounterSpec& spec) {
    miscal.validate();
    const int U = spec.upsample;
    if (U != 1 && U != 2 && U != 4) throw std::invalid_argument("synthesize_counter: upsample must be 1, 2 or 4");
    if (ground_truth.height() % U || ground_truth.width() % U)
        throw std::invalid_argument("synthesize_counter: grid size must be a multiple of the upsample factor");
    if (spec.channels < 1) throw std::invalid_argument("synthesize_counter: need at least one channel");
    const int C = spec.channels;

    const DensityGrid coarse = U > 1 ? downsample_sum(ground_truth, U) : ground_truth;
    const int h = coarse.height(), w = coarse.width();

    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::vector<double> gain(C), mix_out(C);
    std::vector<double> mixing(std::size_t(C) * C);
    for (int c = 0; c < C; ++c) gain[c] = spec.feature_gain / double(U * U) * (0.6 + 0.8 * unit(rng));
    for (int o = 0; o < C; ++o)
        for (int i = 0; i < C; ++i) mixing[std::size_t(o) * C + i] = (o == i ? 1.0 : 0.25 * unit(rng));
    for (int c = 0; c < C; ++c) mix_out[c] = 0.5 + unit(rng);

    ToyCounter tc;
    tc.features = FeatureMap(C, h, w);
    for (int c = 0; c < C; ++c) {
        double alpha = 1.0;
        if (miscal.mode == Miscalibration::Mode::global_scale) alpha = miscal.alpha;
        if (miscal.mode == Miscalibration::Mode::channel_scale && c < int(miscal.channel_alpha.size()))
            alpha = miscal.channel_alpha[c];
        const auto blurred = smooth(coarse, make_kernel(0.5 + 0.35 * c));
        for (std::size_t i = 0; i < blurred.size(); ++i)
            tc.features.values[std::size_t(c) * blurred.size() + i] = alpha * gain[c] * blurred[i];
    }

    static constexpr double stencil[3][3] = {{1, 2, 1}, {2, 4, 2}, {1, 2, 1}};
    auto& hw = tc.weights;
    hw.channels = C;
    hw.upsample = U;
    hw.conv1_w.assign(std::size_t(C) * C * 9, 0.0);
    hw.conv1_b.assign(C, 0.0);
    for (int o = 0; o < C; ++o)
        for (int i = 0; i < C; ++i)
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) hw.w1(o, i, ky, kx) = mixing[std::size_t(o) * C + i] * stencil[ky][kx] / 16.0;

    // Output mass per unit of coarse mass, before projection scaling.
    double unit_mass = 0.0;
    for (int o = 0; o < C; ++o) {
        double per_channel = 0.0;
        for (int i = 0; i < C; ++i) per_channel += mixing[std::size_t(o) * C + i] * gain[i];
        unit_mass += mix_out[o] * per_channel;
    }
    // Interior bilinear weight per input cell for corner-aligned sampling.
    auto axis = [U](int n) { return (U == 1 || n == 1) ? 1.0 : double(n * U - 1) / double(n - 1); };
    unit_mass *= axis(h) * axis(w);
    hw.proj_w.resize(C);
    for (int c = 0; c < C; ++c) hw.proj_w[c] = mix_out[c] / unit_mass;
    hw.proj_b = 0.0;

    // The spurious blob lives in the last channel only, scaled to output mass `magnitude`.
    if (miscal.mode == Miscalibration::Mode::local_blob) {
        const int b = C - 1;
        double out_per_mass = 0.0;
        for (int o = 0; o < C; ++o) out_per_mass += hw.proj_w[o] * mixing[std::size_t(o) * C + b];
        out_per_mass *= axis(h) * axis(w);
        auto blob = blob_density(ground_truth.height(), ground_truth.width(), miscal);
        if (U > 1) blob = downsample_sum(blob, U);
        for (std::size_t i = 0; i < blob.size(); ++i)
            tc.features.values[std::size_t(b) * blob.size() + i] += blob[i] / out_per_mass;
    }
    return tc;
}

inline ToyCounter synthesize_counter(const DotScene& scene, const Miscalibration& miscal, const CounterSpec& spec,
                                     DensityGrid* ground_truth_out = nullptr) {
    auto gt = render_density(scene);
    auto tc = synthesize_counter(gt, miscal, spec);
    if (ground_truth_out) *ground_truth_out = std::move(gt);
    return tc;
}

}  // namespace icount
