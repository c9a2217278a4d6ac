#pragma once

// Range-constrained adaptation of the refinement parameters.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "icount/counter.hpp"
#include "icount/grid.hpp"

namespace icount {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// Half-open count interval (lower, upper]; either side may be infinite.
struct CountRange {
    double lower = -kInf;
    double upper = kInf;

    CountRange() = default;
    CountRange(double lo, double hi) : lower(lo), upper(hi) {
        if (!(lo < hi)) throw std::invalid_argument("CountRange: lower must be below upper");
    }

    bool contains(double x) const { return lower < x && x <= upper; }
    bool operator==(const CountRange&) const = default;
};

struct FeedbackRecord {
    std::vector<std::uint32_t> region;  // full-resolution pixel indices
    CountRange range;
    int iteration = 0;
    std::uint32_t region_id = 0;        // id shown to the user when the feedback was given
};

using Feedback = std::vector<FeedbackRecord>;

struct AdaptConfig {
    double lr = 0.02;               // gamma
    int steps = 10;                 // N
    double reg_weight = 0.002;      // eta
    int info_threshold = 3;         // t
    double temperature = 2.0;       // T
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double log_base = 2.0;          // for the consistency entropy
    double confidence_floor = 0.05;
    bool confidence_scaling = true;
    bool reset_per_interaction = false;

    void validate() const {
        if (!(lr > 0.0)) throw std::invalid_argument("AdaptConfig: lr must be positive");
        if (steps < 1) throw std::invalid_argument("AdaptConfig: steps must be >= 1");
        if (!(reg_weight >= 0.0)) throw std::invalid_argument("AdaptConfig: reg_weight must be >= 0");
        if (!(temperature > 0.0)) throw std::invalid_argument("AdaptConfig: temperature must be positive");
    }
};

// ---- losses -----------------------------------------------------------------

inline double loss_interactive(double sum, const CountRange& range) {
    double loss = 0.0;
    if (std::isfinite(range.lower)) loss += std::max(0.0, range.lower - sum);
    if (std::isfinite(range.upper)) loss += std::max(0.0, sum - range.upper);
    return loss;
}

/// d loss_interactive / d sum (0 on the closed interval).
inline double loss_interactive_slope(double sum, const CountRange& range) {
    if (std::isfinite(range.lower) && sum < range.lower) return -1.0;
    if (std::isfinite(range.upper) && sum > range.upper) return 1.0;
    return 0.0;
}

/// Sum of ranges with extended-real arithmetic.
inline CountRange combined_range(const Feedback& omega) {
    double lo = 0.0, hi = 0.0;
    for (const auto& r : omega) {
        lo += r.range.lower;
        hi += r.range.upper;
    }
    CountRange out;
    out.lower = lo;
    out.upper = hi;
    return out;
}

inline double loss_local(const Feedback& omega, const DensityGrid& prediction) {
    double total = 0.0;
    for (const auto& r : omega) total += loss_interactive(prediction.sum_over(r.region), r.range);
    return total;
}

inline double loss_global(const Feedback& omega, const DensityGrid& prediction) {
    if (omega.empty()) return 0.0;
    double sum = 0.0;
    for (const auto& r : omega) sum += prediction.sum_over(r.region);
    return loss_interactive(sum, combined_range(omega));
}

inline double regularizer(const RefinementParams& p) {
    double s = 0.0;
    for (double v : p.ch_scale) s += (v - 1.0) * (v - 1.0);
    for (double v : p.sp_scale) s += (v - 1.0) * (v - 1.0);
    for (double v : p.ch_bias) s += v * v;
    for (double v : p.sp_bias) s += v * v;
    return s;
}

inline double loss_total(const Feedback& omega, const DensityGrid& prediction, const RefinementParams& params,
                         const AdaptConfig& cfg) {
    return loss_local(omega, prediction) + loss_global(omega, prediction) + cfg.reg_weight * regularizer(params);
}

/// dL/dD of loss_local + loss_global.
inline DensityGrid loss_gradient(const Feedback& omega, const DensityGrid& prediction) {
    DensityGrid g(prediction.height(), prediction.width());
    if (omega.empty()) return g;
    std::vector<double> sums(omega.size());
    double total = 0.0;
    for (std::size_t k = 0; k < omega.size(); ++k) total += sums[k] = prediction.sum_over(omega[k].region);
    const double global_slope = loss_interactive_slope(total, combined_range(omega));
    for (std::size_t k = 0; k < omega.size(); ++k) {
        const double slope = loss_interactive_slope(sums[k], omega[k].range) + global_slope;
        if (slope == 0.0) continue;
        for (auto p : omega[k].region) g[p] += slope;
    }
    return g;
}

inline void add_regularizer_gradient(RefinementParams& grad, const RefinementParams& p, double weight) {
    if (weight == 0.0) return;
    for (std::size_t i = 0; i < p.ch_scale.size(); ++i) grad.ch_scale[i] += 2.0 * weight * (p.ch_scale[i] - 1.0);
    for (std::size_t i = 0; i < p.sp_scale.size(); ++i) grad.sp_scale[i] += 2.0 * weight * (p.sp_scale[i] - 1.0);
    for (std::size_t i = 0; i < p.ch_bias.size(); ++i) grad.ch_bias[i] += 2.0 * weight * p.ch_bias[i];
    for (std::size_t i = 0; i < p.sp_bias.size(); ++i) grad.sp_bias[i] += 2.0 * weight * p.sp_bias[i];
}

// ---- confidence -------------------------------------------------------------

inline double confidence_informativeness(std::size_t feedback_count, const AdaptConfig& cfg) {
    return std::min(1.0, std::exp((double(feedback_count) - cfg.info_threshold) / cfg.temperature));
}

/// Negative-entropy consistency of a given over/under split.
inline double consistency_from_counts(std::size_t over, std::size_t under, double log_base = 2.0) {
    if (over + under == 0) return 1.0;
    const double p = double(over) / double(over + under);
    auto xlogx = [&](double v) { return v > 0.0 ? v * std::log(v) / std::log(log_base) : 0.0; };
    return 1.0 + xlogx(p) + xlogx(1.0 - p);
}

inline double confidence_consistency(const Feedback& omega, const DensityGrid& prediction,
                                     double log_base = 2.0) {
    std::size_t over = 0, under = 0;
    for (const auto& r : omega) {
        const double s = prediction.sum_over(r.region);
        if (s > r.range.upper) ++over;
        else if (s <= r.range.lower) ++under;
    }
    return consistency_from_counts(over, under, log_base);
}

inline double confidence(const Feedback& omega, const DensityGrid& prediction, const AdaptConfig& cfg) {
    const double fc = 0.5 * confidence_informativeness(omega.size(), cfg) +
                      0.5 * confidence_consistency(omega, prediction, cfg.log_base);
    return std::max(cfg.confidence_floor, fc);
}

struct StepSchedule {
    double lr = 0.0;
    int steps = 0;
};

inline StepSchedule adapt_step_counts(const AdaptConfig& cfg, double fc) {
    if (!(fc > 0.0 && fc <= 1.0)) throw std::invalid_argument("adapt_step_counts: confidence must be in (0, 1]");
    // Guard against 10 / 0.1 landing a hair above an integer.
    const double raw = double(cfg.steps) / fc;
    const double nearest = std::round(raw);
    const int steps = std::abs(raw - nearest) < 1e-9 * nearest ? int(nearest) : int(std::ceil(raw));
    return {cfg.lr * fc, steps};
}

// ---- optimizer ---------------------------------------------------------------

struct AdamState {
    RefinementParams m, v;
    long long step = 0;

    static AdamState zeros_like(const RefinementParams& p) {
        return {RefinementParams::zeros_like(p), RefinementParams::zeros_like(p), 0};
    }
    bool operator==(const AdamState&) const = default;
};

inline void adam_update(RefinementParams& params, const RefinementParams& grad, AdamState& state, double lr,
                        const AdaptConfig& cfg) {
    ++state.step;
    const double c1 = 1.0 - std::pow(cfg.beta1, double(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, double(state.step));
    auto p = params.blocks();
    auto g = grad.blocks();
    auto m = state.m.blocks();
    auto v = state.v.blocks();
    for (std::size_t b = 0; b < 4; ++b)
        for (std::size_t i = 0; i < p[b].size(); ++i) {
            m[b][i] = cfg.beta1 * m[b][i] + (1.0 - cfg.beta1) * g[b][i];
            v[b][i] = cfg.beta2 * v[b][i] + (1.0 - cfg.beta2) * g[b][i] * g[b][i];
            const double update = lr * (m[b][i] / c1) / (std::sqrt(v[b][i] / c2) + cfg.epsilon);
            p[b][i] -= update;
        }
}

// ---- interaction loop ----------------------------------------------------------

struct AdaptResult {
    DensityGrid prediction;
    std::vector<double> loss_trajectory;  // loss_total before each step, then after the last
    double confidence = 1.0;
    StepSchedule schedule;
};

/// One interaction's worth of confidence-scaled Adam steps on loss_total.
/// Region sums are re-read from the fresh prediction at every step.
inline AdaptResult adapt(const ToyCounter& counter, RefinementParams& params, AdamState& adam, const Feedback& omega,
                         const AdaptConfig& cfg) {
    cfg.validate();
    if (omega.empty()) throw std::invalid_argument("adapt: feedback set is empty");
    if (cfg.reset_per_interaction) {
        params = counter.identity_params();
        adam = AdamState::zeros_like(params);
    }
    if (adam.m.ch_scale.size() != params.ch_scale.size()) adam = AdamState::zeros_like(params);

    AdaptResult out;
    auto trace = counter.trace(params);
    out.confidence = cfg.confidence_scaling ? confidence(omega, trace.density, cfg) : 1.0;
    out.schedule = adapt_step_counts(cfg, out.confidence);

    for (int s = 0; s < out.schedule.steps; ++s) {
        out.loss_trajectory.push_back(loss_total(omega, trace.density, params, cfg));
        auto grad = counter.backward(params, trace, loss_gradient(omega, trace.density));
        add_regularizer_gradient(grad, params, cfg.reg_weight);
        adam_update(params, grad, adam, out.schedule.lr, cfg);
        trace = counter.trace(params);
    }
    out.loss_trajectory.push_back(loss_total(omega, trace.density, params, cfg));
    out.prediction = std::move(trace.density);
    return out;
}

}  // namespace icount
