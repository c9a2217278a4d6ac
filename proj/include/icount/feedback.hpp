#pragma once

// Simulated user: range bins, region selection, and noisy estimates.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "icount/adaptation.hpp"
#include "icount/grid.hpp"
#include "icount/ipse.hpp"

namespace icount {

/// {(-inf,0], (0,r], (r,2r], ..., (C-r,C], (C,inf)}
struct RangeFamily {
    double count_limit = 4.0;
    double interval = 1.0;

    void validate() const {
        if (!(count_limit > 0.0 && interval > 0.0)) throw std::invalid_argument("RangeFamily: C and r must be positive");
        const double k = count_limit / interval;
        if (std::abs(k - std::round(k)) > 1e-9) throw std::invalid_argument("RangeFamily: r must divide C");
    }

    std::size_t size() const { return std::size_t(std::llround(count_limit / interval)) + 2; }

    std::vector<CountRange> bins() const {
        validate();
        std::vector<CountRange> out;
        out.emplace_back(-kInf, 0.0);
        const auto k = std::llround(count_limit / interval);
        for (long long i = 0; i < k; ++i) out.emplace_back(double(i) * interval, double(i + 1) * interval);
        out.emplace_back(count_limit, kInf);
        return out;
    }

    /// Button labels: "0", "0–1", ..., ">C".
    std::vector<std::string> labels() const {
        auto fmt = [](double v) {
            if (v == std::round(v)) return std::to_string(std::llround(v));
            auto s = std::to_string(v);
            s.erase(s.find_last_not_of('0') + 1);
            return s;
        };
        std::vector<std::string> out;
        for (const auto& b : bins()) {
            if (!std::isfinite(b.lower)) out.push_back(fmt(b.upper));
            else if (!std::isfinite(b.upper)) out.push_back(">" + fmt(b.lower));
            else out.push_back(fmt(b.lower) + "–" + fmt(b.upper));
        }
        return out;
    }
};

inline std::size_t bin_index(double x, const RangeFamily& family) {
    family.validate();
    if (x <= 0.0) return 0;
    if (x > family.count_limit) return family.size() - 1;
    // x in (i r, (i+1) r]  ->  i + 1
    auto i = static_cast<long long>(std::ceil(x / family.interval)) - 1;
    i = std::clamp<long long>(i, 0, std::llround(family.count_limit / family.interval) - 1);
    return std::size_t(i) + 1;
}

inline CountRange bin_count(double x, const RangeFamily& family) { return family.bins()[bin_index(x, family)]; }

enum class Strategy { random, background_prior, error_based };
enum class NoiseLevel { none, moderate, large };
enum class TruthMode { integral, dot_centers };

class RegionsExhausted : public std::runtime_error {
public:
    RegionsExhausted() : std::runtime_error("every region has already been selected") {}
};

/// Region sums of the prediction and ground truth, paired by region.
struct RegionScore {
    std::uint32_t id = 0;
    double predicted = 0.0;
    double truth = 0.0;
};

inline std::uint32_t select_region(const std::vector<RegionScore>& regions, Strategy strategy,
                                   const std::set<std::uint32_t>& already_selected, std::mt19937_64& rng) {
    std::vector<const RegionScore*> open;
    for (const auto& r : regions)
        if (!already_selected.count(r.id)) open.push_back(&r);
    if (open.empty()) throw RegionsExhausted();

    auto uniform = [&](const std::vector<const RegionScore*>& pool) {
        std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
        return pool[pick(rng)]->id;
    };
    switch (strategy) {
        case Strategy::random: return uniform(open);
        case Strategy::background_prior: {
            std::vector<const RegionScore*> empty;
            for (auto* r : open)
                if (r->truth < 0.5) empty.push_back(r);
            return uniform(empty.empty() ? open : empty);
        }
        case Strategy::error_based: {
            const RegionScore* best = open.front();
            for (auto* r : open) {
                const double e = std::abs(r->predicted - r->truth), be = std::abs(best->predicted - best->truth);
                if (e > be || (e == be && r->id < best->id)) best = r;
            }
            return best->id;
        }
    }
    throw std::logic_error("select_region: unknown strategy");
}

inline int noise_amplitude(const RangeFamily& family, NoiseLevel level) {
    switch (level) {
        case NoiseLevel::none: return 0;
        case NoiseLevel::moderate: return int(std::lround(0.3 * family.count_limit));
        case NoiseLevel::large: return int(std::lround(0.5 * family.count_limit));
    }
    return 0;
}

/// Adds a uniform integer offset in [-a, a] (a = 30% or 50% of C), clamped at 0.
inline double noisy_truth(double x, const RangeFamily& family, NoiseLevel level, std::mt19937_64& rng) {
    if (level == NoiseLevel::none) return x;
    const int a = noise_amplitude(family, level);
    std::uniform_int_distribution<int> offset(-a, a);
    return std::max(0.0, x + offset(rng));
}

/// Ground-truth count for a region: density integral, or dots whose centre pixel lies inside.
inline double region_truth(const Region& region, const DensityGrid& gt, TruthMode mode,
                           const std::vector<Dot>* dots = nullptr) {
    if (mode == TruthMode::integral || dots == nullptr) return gt.sum_over(region.pixels);
    std::set<std::uint32_t> inside(region.pixels.begin(), region.pixels.end());
    double n = 0.0;
    for (const auto& d : *dots) {
        auto p = std::uint32_t(int(d.y) * gt.width() + int(d.x));
        n += inside.count(p);
    }
    return n;
}

/// Everything the simulated user needs for one click pair.
struct SimulatedUser {
    Strategy strategy = Strategy::random;
    NoiseLevel noise = NoiseLevel::none;
    RangeFamily family;
    TruthMode truth_mode = TruthMode::integral;
    std::mt19937_64 rng;
    std::set<std::uint32_t> selected;  // reset whenever the map is re-segmented
    std::set<std::vector<std::uint32_t>> annotated;  // sorted pixel sets already answered, kept across re-segmentation

    explicit SimulatedUser(std::uint64_t seed = 0) : rng(seed) {}

    void new_segmentation() { selected.clear(); }

    static std::vector<std::uint32_t> sorted_pixels(const Region& r) {
        auto px = r.pixels;
        std::sort(px.begin(), px.end());
        return px;
    }

    /// select -> ground truth over region -> noise -> bin. Appends to omega.
    FeedbackRecord interact(const std::vector<Region>& regions, const DensityGrid& gt, const DensityGrid& pred,
                            Feedback& omega, int iteration, const std::vector<Dot>* dots = nullptr) {
        std::vector<RegionScore> scores;
        scores.reserve(regions.size());
        for (const auto& r : regions)
            scores.push_back({r.id, pred.sum_over(r.pixels), region_truth(r, gt, truth_mode, dots)});
        // A re-segmented region with exactly the same pixels is the same region.
        auto excluded = selected;
        for (const auto& r : regions)
            if (!excluded.count(r.id) && annotated.count(sorted_pixels(r))) excluded.insert(r.id);
        const auto id = select_region(scores, strategy, excluded, rng);
        selected.insert(id);
        const auto it = std::find_if(regions.begin(), regions.end(), [&](const Region& r) { return r.id == id; });
        annotated.insert(sorted_pixels(*it));
        const auto sit = std::find_if(scores.begin(), scores.end(), [&](const RegionScore& s) { return s.id == id; });
        FeedbackRecord rec;
        rec.region = it->pixels;
        rec.region_id = id;
        rec.iteration = iteration;
        rec.range = bin_count(noisy_truth(sit->truth, family, noise, rng), family);
        omega.push_back(rec);
        return rec;
    }
};

}  // namespace icount
