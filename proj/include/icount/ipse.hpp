#pragma once

// Iterative peak selection and expansion (IPSE): partitions a density map into
// contiguous regions whose integrals sit near small integers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <queue>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "icount/grid.hpp"

namespace icount {

struct SegmentationConfig {
    int count_limit = 4;             // C
    int area_lower = 250;            // T_l, preferred minimum area
    int area_upper = 1250;           // T_u, hard expansion cap
    double zero_fraction_max = 0.5;  // z
    int merge_threshold = -1;        // < 0 means area_lower / 2
    double smooth_sigma = 1.5;
    int smooth_radius = 6;
    int downsample_factor = 4;
    std::uint64_t seed = 0;          // background splitting RNG

    int effective_merge_threshold() const { return merge_threshold < 0 ? area_lower / 2 : merge_threshold; }

    void validate() const {
        if (!(area_lower > 0 && area_lower < area_upper))
            throw std::invalid_argument("SegmentationConfig: require 0 < area_lower < area_upper");
        if (count_limit < 1) throw std::invalid_argument("SegmentationConfig: count_limit must be >= 1");
        if (!(zero_fraction_max > 0.0 && zero_fraction_max <= 1.0))
            throw std::invalid_argument("SegmentationConfig: zero_fraction_max must be in (0, 1]");
        if (downsample_factor < 1) throw std::invalid_argument("SegmentationConfig: downsample_factor must be >= 1");
    }
};

enum class RegionKind { foreground, background };

inline const char* to_string(RegionKind k) { return k == RegionKind::foreground ? "foreground" : "background"; }

struct Region {
    std::uint32_t id = 0;
    std::vector<std::uint32_t> pixels;  // flat row-major indices
    double sum = 0.0;                   // R_s
    int area = 0;                       // R_a
    RegionKind kind = RegionKind::foreground;
};

struct Segmentation {
    LabelMap labels;
    std::vector<Region> regions;  // regions[i].id == i after segment()
    double source_total = 0.0;
    double source_max = 0.0;      // largest single-pixel density of the segmented grid
};

/// Eq.-1 style objective: near-integer sum, area below T_l, and sum above C are penalized.
inline double objective_h(double sum, int area, const SegmentationConfig& cfg) {
    if (area < 1) throw std::invalid_argument("objective_h: area must be >= 1");
    const double nearest = std::ceil(sum - 0.5);
    const double integrality = std::abs(sum - nearest) / std::max(1.0, nearest);
    const double small = std::max(0.0, double(cfg.area_lower - area)) / cfg.area_lower;
    const double over = std::ceil(std::max(0.0, sum - cfg.count_limit));
    return integrality + small + over;
}

/// Result of growing one peak: the full greedy sequence and the best prefix.
struct Expansion {
    Region region;                        // best prefix S_k
    std::vector<std::uint32_t> sequence;  // every pixel added, in order; sequence[0] is the peak
    std::size_t best_length = 0;          // k + 1
    double best_objective = std::numeric_limits<double>::infinity();
};

namespace detail {

// Reusable scratch for repeated expansions on one grid.
class Expander {
public:
    explicit Expander(std::size_t n) : stamp_(n, 0) {}

    Expansion run(const DensityGrid& grid, std::span<const std::uint32_t> owner, std::uint32_t unclaimed,
                  std::uint32_t peak, const SegmentationConfig& cfg) {
        if (owner[peak] != unclaimed) throw std::logic_error("expand_peak: peak already claimed");
        ++epoch_;
        const int w = grid.width(), h = grid.height();
        const int py = int(peak) / w, px = int(peak) % w;

        struct Entry {
            bool zero;
            long long dist2;
            std::uint32_t index;
            bool operator>(const Entry& o) const {
                if (zero != o.zero) return zero > o.zero;
                if (dist2 != o.dist2) return dist2 > o.dist2;
                return index > o.index;
            }
        };
        std::priority_queue<Entry, std::vector<Entry>, std::greater<>> frontier;

        Expansion out;
        double sum = 0.0;
        int fg = 0, bg = 0;

        auto push_neighbours = [&](std::uint32_t p) {
            const int y = int(p) / w, x = int(p) % w;
            const int ny[4] = {y - 1, y + 1, y, y};
            const int nx[4] = {x, x, x - 1, x + 1};
            for (int k = 0; k < 4; ++k) {
                if (ny[k] < 0 || ny[k] >= h || nx[k] < 0 || nx[k] >= w) continue;
                auto q = static_cast<std::uint32_t>(ny[k] * w + nx[k]);
                if (owner[q] != unclaimed || stamp_[q] == epoch_) continue;
                stamp_[q] = epoch_;
                long long dy = ny[k] - py, dx = nx[k] - px;
                frontier.push({!(grid[q] > 0.0), dy * dy + dx * dx, q});
            }
        };
        auto admit = [&](std::uint32_t p) {
            out.sequence.push_back(p);
            sum += grid[p];
            (grid[p] > 0.0 ? fg : bg) += 1;
            const double value = objective_h(sum, int(out.sequence.size()), cfg);
            if (value < out.best_objective) {
                out.best_objective = value;
                out.best_length = out.sequence.size();
            }
        };

        stamp_[peak] = epoch_;
        admit(peak);
        push_neighbours(peak);
        while (!frontier.empty()) {
            const int area = int(out.sequence.size());
            if (area >= cfg.area_upper || sum >= cfg.count_limit) break;
            if (double(bg) / area > cfg.zero_fraction_max) break;
            const Entry top = frontier.top();
            // Positive pixels always sort first, so a zero on top means none are left.
            if (top.zero && !(fg > bg)) break;
            frontier.pop();
            admit(top.index);
            push_neighbours(top.index);
        }

        out.region.pixels.assign(out.sequence.begin(), out.sequence.begin() + std::ptrdiff_t(out.best_length));
        out.region.area = int(out.best_length);
        double s = 0.0;
        for (auto p : out.region.pixels) s += grid[p];
        out.region.sum = s;
        out.region.kind = RegionKind::foreground;
        return out;
    }

private:
    std::vector<std::uint32_t> stamp_;
    std::uint32_t epoch_ = 0;
};

inline constexpr std::uint32_t kUnclaimed = std::numeric_limits<std::uint32_t>::max();

}  // namespace detail

/// Greedy expansion from `peak` over pixels whose owner is `unclaimed`.
/// Returns the prefix of the expansion sequence with the lowest objective.
inline Expansion expand_peak(const DensityGrid& grid, std::span<const std::uint32_t> owner, std::uint32_t peak,
                             const SegmentationConfig& cfg, std::uint32_t unclaimed = detail::kUnclaimed) {
    detail::Expander ex(grid.size());
    return ex.run(grid, owner, unclaimed, peak, cfg);
}

/// Partitions every pixel whose owner is `unclaimed` into 4-connected chunks of
/// at most T_u pixels, flooding breadth-first from randomly ordered seeds.
inline std::vector<Region> split_background(const DensityGrid& grid, std::span<const std::uint32_t> owner,
                                            const SegmentationConfig& cfg,
                                            std::uint32_t unclaimed = detail::kUnclaimed) {
    std::vector<std::uint32_t> free;
    for (std::uint32_t i = 0; i < owner.size(); ++i)
        if (owner[i] == unclaimed) free.push_back(i);
    if (free.empty()) return {};

    std::mt19937_64 rng(cfg.seed);
    std::shuffle(free.begin(), free.end(), rng);

    const int w = grid.width(), h = grid.height();
    std::vector<std::uint8_t> taken(owner.size(), 0);
    for (std::uint32_t i = 0; i < owner.size(); ++i) taken[i] = owner[i] != unclaimed;

    std::vector<Region> out;
    std::vector<std::uint32_t> queue;
    for (auto seed : free) {
        if (taken[seed]) continue;
        Region r;
        r.kind = RegionKind::background;
        queue.assign(1, seed);
        taken[seed] = 1;
        for (std::size_t head = 0; head < queue.size() && r.pixels.size() < std::size_t(cfg.area_upper); ++head) {
            const auto p = queue[head];
            r.pixels.push_back(p);
            const int y = int(p) / w, x = int(p) % w;
            const int ny[4] = {y - 1, y + 1, y, y};
            const int nx[4] = {x, x, x - 1, x + 1};
            for (int k = 0; k < 4; ++k) {
                if (ny[k] < 0 || ny[k] >= h || nx[k] < 0 || nx[k] >= w) continue;
                auto q = static_cast<std::uint32_t>(ny[k] * w + nx[k]);
                if (taken[q]) continue;
                taken[q] = 1;
                queue.push_back(q);
            }
        }
        // Pixels queued but not absorbed go back to the free pool.
        for (std::size_t i = r.pixels.size(); i < queue.size(); ++i) taken[queue[i]] = 0;
        std::sort(r.pixels.begin(), r.pixels.end());
        r.area = int(r.pixels.size());
        for (auto p : r.pixels) r.sum += grid[p];
        out.push_back(std::move(r));
    }
    return out;
}

/// Assigns compact ids 0..n-1 in the current order and rewrites the label map.
inline void relabel(Segmentation& seg) {
    for (std::uint32_t i = 0; i < seg.regions.size(); ++i) {
        auto& r = seg.regions[i];
        r.id = i;
        for (auto p : r.pixels) seg.labels.labels[p] = i;
    }
}

/// Merges every region smaller than the merge threshold into the neighbour
/// sharing the longest boundary (ties: smaller id), until no mergeable small
/// region remains. A foreground target that would exceed C + source_max
/// becomes background.
inline Segmentation merge_small(Segmentation seg, const SegmentationConfig& cfg) {
    const int threshold = cfg.effective_merge_threshold();
    const auto& lab = seg.labels;
    const int w = lab.width, h = lab.height;

    std::map<std::uint32_t, std::size_t> slot;  // label -> index in regions
    for (std::size_t i = 0; i < seg.regions.size(); ++i) slot[seg.regions[i].id] = i;

    std::map<std::uint32_t, std::map<std::uint32_t, int>> adj;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const auto a = lab.at(y, x);
            if (x + 1 < w && lab.at(y, x + 1) != a) {
                ++adj[a][lab.at(y, x + 1)];
                ++adj[lab.at(y, x + 1)][a];
            }
            if (y + 1 < h && lab.at(y + 1, x) != a) {
                ++adj[a][lab.at(y + 1, x)];
                ++adj[lab.at(y + 1, x)][a];
            }
        }

    std::vector<std::uint8_t> alive(seg.regions.size(), 1);
    const double cap = cfg.count_limit + seg.source_max;
    bool changed = true;
    while (changed) {
        changed = false;
        for (auto& [id, src_slot] : slot) {
            if (!alive[src_slot]) continue;
            auto& src = seg.regions[src_slot];
            if (src.area >= threshold) continue;
            auto& nbrs = adj[id];
            if (nbrs.empty()) continue;
            // Longest shared boundary, preferring neighbours that stay within the count cap.
            std::uint32_t target = 0;
            int best = -1;
            bool best_fits = false;
            for (const auto& [n, len] : nbrs) {  // ascending id, strict > keeps the smaller on ties
                const bool fits = seg.regions[slot.at(n)].sum + src.sum <= cap;
                if ((fits && !best_fits) || (fits == best_fits && len > best)) {
                    best = len;
                    target = n;
                    best_fits = fits;
                }
            }
            auto& dst = seg.regions[slot.at(target)];
            dst.pixels.insert(dst.pixels.end(), src.pixels.begin(), src.pixels.end());
            dst.area += src.area;
            dst.sum += src.sum;
            if (dst.kind == RegionKind::foreground && dst.sum > cap) dst.kind = RegionKind::background;
            for (const auto& [n, len] : nbrs) {
                if (n == target) continue;
                adj[target][n] += len;
                adj[n][target] += len;
                adj[n].erase(id);
            }
            adj[target].erase(id);
            adj.erase(id);
            alive[src_slot] = 0;
            src.pixels.clear();
            changed = true;
        }
    }

    Segmentation out;
    out.labels = std::move(seg.labels);
    out.source_total = seg.source_total;
    out.source_max = seg.source_max;
    for (std::size_t i = 0; i < seg.regions.size(); ++i)
        if (alive[i]) {
            std::sort(seg.regions[i].pixels.begin(), seg.regions[i].pixels.end());
            out.regions.push_back(std::move(seg.regions[i]));
        }
    std::stable_sort(out.regions.begin(), out.regions.end(), [](const Region& a, const Region& b) { return a.id < b.id; });
    relabel(out);
    return out;
}

/// Remaining-mass slack for the `S >= 1` loop; absorbs float rounding of integral masses.
inline constexpr double kRemainingMassSlack = 1e-6;

/// Full IPSE pass on a working-resolution grid.
inline Segmentation segment(const DensityGrid& grid, const SegmentationConfig& cfg) {
    cfg.validate();
    const std::size_t n = grid.size();
    const DensityGrid smoothed = smooth(grid, SmoothKernel{cfg.smooth_sigma, cfg.smooth_radius});

    std::vector<std::uint32_t> order(n);
    for (std::uint32_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return smoothed[a] > smoothed[b]; });

    std::vector<std::uint32_t> owner(n, detail::kUnclaimed);
    Segmentation seg;
    seg.labels = LabelMap(grid.height(), grid.width());
    seg.source_total = grid.total();
    seg.source_max = grid.max_value();

    detail::Expander expander(n);
    double remaining = seg.source_total;
    // Peaks come from unclaimed pixels only; overshoot past the best prefix stays available.
    std::size_t cursor = 0;
    while (remaining >= 1.0 - kRemainingMassSlack) {
        while (cursor < n && owner[order[cursor]] != detail::kUnclaimed) ++cursor;
        if (cursor == n) break;
        const auto peak = order[cursor];
        auto ex = expander.run(grid, owner, detail::kUnclaimed, peak, cfg);
        const auto id = static_cast<std::uint32_t>(seg.regions.size());
        ex.region.id = id;
        for (auto p : ex.region.pixels) owner[p] = id;
        remaining -= ex.region.sum;
        seg.regions.push_back(std::move(ex.region));
    }

    for (auto& r : split_background(grid, owner, cfg)) {
        r.id = static_cast<std::uint32_t>(seg.regions.size());
        for (auto p : r.pixels) owner[p] = r.id;
        seg.regions.push_back(std::move(r));
    }
    seg.labels.labels = std::move(owner);
    return merge_small(std::move(seg), cfg);
}

/// Rebuilds region pixel lists and sums for `labels` against another grid of the same shape.
inline std::vector<Region> regions_from_labels(const LabelMap& labels, const DensityGrid& grid,
                                               std::span<const RegionKind> kinds = {}) {
    std::uint32_t count = 0;
    for (auto l : labels.labels) count = std::max(count, l + 1);
    std::vector<Region> out(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        out[i].id = i;
        if (i < kinds.size()) out[i].kind = kinds[i];
    }
    for (std::uint32_t p = 0; p < labels.labels.size(); ++p) {
        auto& r = out[labels.labels[p]];
        r.pixels.push_back(p);
        r.sum += grid[p];
    }
    for (auto& r : out) r.area = int(r.pixels.size());
    return out;
}

/// Segmentation of a full-resolution map: sum-pool by the configured factor,
/// run IPSE there, then replicate labels back to full size.
struct FullSegmentation {
    Segmentation working;        // at the pooled resolution
    LabelMap labels;             // full resolution
    std::vector<Region> regions; // full resolution, sums taken from the input map
};

inline FullSegmentation segment_full(const DensityGrid& grid, const SegmentationConfig& cfg) {
    FullSegmentation out;
    const int f = cfg.downsample_factor;
    out.working = segment(f > 1 ? downsample_sum(grid, f) : grid, cfg);
    out.labels = f > 1 ? upsample_labels(out.working.labels, f, grid.height(), grid.width()) : out.working.labels;
    std::vector<RegionKind> kinds;
    for (const auto& r : out.working.regions) kinds.push_back(r.kind);
    out.regions = regions_from_labels(out.labels, grid, kinds);
    return out;
}

}  // namespace icount
