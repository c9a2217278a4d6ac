#pragma once

// Density grids, label maps, dot-scene rendering, smoothing and resampling.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace icount {

/// Row-major H x W field of non-negative density mass.
class DensityGrid {
public:
    DensityGrid() = default;
    DensityGrid(int height, int width, double fill = 0.0)
        : height_(height), width_(width), values_(checked_size(height, width), fill) {}
    DensityGrid(int height, int width, std::vector<double> values)
        : height_(height), width_(width), values_(std::move(values)) {
        if (values_.size() != checked_size(height, width))
            throw std::invalid_argument("DensityGrid: value count does not match shape");
    }

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    double& at(int y, int x) { return values_[index(y, x)]; }
    double at(int y, int x) const { return values_[index(y, x)]; }
    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }

    std::size_t index(int y, int x) const noexcept {
        return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
    }

    std::span<double> values() noexcept { return values_; }
    std::span<const double> values() const noexcept { return values_; }

    double total() const noexcept { return std::accumulate(values_.begin(), values_.end(), 0.0); }
    double max_value() const noexcept {
        return values_.empty() ? 0.0 : *std::max_element(values_.begin(), values_.end());
    }

    /// Sum over a set of flat pixel indices.
    double sum_over(std::span<const std::uint32_t> pixels) const {
        double s = 0.0;
        for (auto p : pixels) s += values_.at(p);
        return s;
    }

    bool operator==(const DensityGrid&) const = default;

private:
    static std::size_t checked_size(int h, int w) {
        if (h <= 0 || w <= 0) throw std::invalid_argument("DensityGrid: dimensions must be positive");
        return static_cast<std::size_t>(h) * static_cast<std::size_t>(w);
    }

    int height_ = 0;
    int width_ = 0;
    std::vector<double> values_;
};

/// Checks the DensityGrid invariants (finite, non-negative, at least 8x8).
inline void validate_density(const DensityGrid& g) {
    if (g.height() < 8 || g.width() < 8)
        throw std::invalid_argument("density grid must be at least 8x8");
    for (double v : g.values())
        if (!std::isfinite(v) || v < 0.0)
            throw std::invalid_argument("density grid values must be finite and non-negative");
}

/// Row-major H x W map of region labels.
struct LabelMap {
    int height = 0;
    int width = 0;
    std::vector<std::uint32_t> labels;

    LabelMap() = default;
    LabelMap(int h, int w, std::uint32_t fill = 0)
        : height(h), width(w), labels(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), fill) {}

    std::uint32_t& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
    std::uint32_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }

    bool operator==(const LabelMap&) const = default;
};

struct Dot {
    double x = 0.0;
    double y = 0.0;
};

/// Synthetic point annotations rendered into ground-truth density.
struct DotScene {
    int height = 0;
    int width = 0;
    double sigma = 2.0;
    std::vector<Dot> dots;
};

struct SmoothKernel {
    double sigma = 1.5;
    int radius = 6;

    /// Normalized 1-D Gaussian taps for offsets -radius..radius.
    std::vector<double> taps() const {
        if (!(sigma > 0.0)) throw std::invalid_argument("SmoothKernel: sigma must be positive");
        if (radius < static_cast<int>(std::ceil(2.0 * sigma)))
            throw std::invalid_argument("SmoothKernel: radius must be at least ceil(2*sigma)");
        std::vector<double> w(static_cast<std::size_t>(2 * radius + 1));
        double s = 0.0;
        for (int k = -radius; k <= radius; ++k) {
            double v = std::exp(-0.5 * (k * k) / (sigma * sigma));
            w[static_cast<std::size_t>(k + radius)] = v;
            s += v;
        }
        for (auto& v : w) v /= s;
        return w;
    }

    /// Weight of the separable 2-D kernel at the origin.
    double center_weight() const {
        auto t = taps();
        double c = t[static_cast<std::size_t>(radius)];
        return c * c;
    }
};

inline SmoothKernel make_kernel(double sigma) {
    return SmoothKernel{sigma, std::max(1, static_cast<int>(std::ceil(4.0 * sigma)))};
}

namespace detail {

// Half-sample symmetric reflection (d c b a | a b c d), folded until inside.
inline int reflect(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * n;
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - 1 - i;
}

// Scatter-form separable pass: every input cell hands its mass to reflected
// targets, so the total is preserved exactly up to rounding.
inline void scatter_pass(std::span<const double> in, std::span<double> out, int outer, int inner, int stride_outer,
                         int stride_inner, std::span<const double> taps, int radius) {
    for (int o = 0; o < outer; ++o) {
        for (int i = 0; i < inner; ++i) {
            double v = in[static_cast<std::size_t>(o) * stride_outer + static_cast<std::size_t>(i) * stride_inner];
            if (v == 0.0) continue;
            for (int k = -radius; k <= radius; ++k) {
                int t = reflect(i + k, inner);
                out[static_cast<std::size_t>(o) * stride_outer + static_cast<std::size_t>(t) * stride_inner] +=
                    v * taps[static_cast<std::size_t>(k + radius)];
            }
        }
    }
}

}  // namespace detail

/// Gaussian smoothing with reflective borders. Mass preserving.
inline DensityGrid smooth(const DensityGrid& grid, const SmoothKernel& kernel) {
    const auto taps = kernel.taps();
    const int h = grid.height(), w = grid.width();
    DensityGrid tmp(h, w), out(h, w);
    detail::scatter_pass(grid.values(), tmp.values(), h, w, w, 1, taps, kernel.radius);
    detail::scatter_pass(tmp.values(), out.values(), w, h, 1, w, taps, kernel.radius);
    return out;
}

/// Renders each dot as a truncated Gaussian (radius ceil(4 sigma)) renormalized to unit mass.
inline DensityGrid render_density(const DotScene& scene) {
    if (!(scene.sigma > 0.0)) throw std::invalid_argument("render_density: sigma must be positive");
    DensityGrid out(scene.height, scene.width);
    const int radius = static_cast<int>(std::ceil(4.0 * scene.sigma));
    const double inv2s2 = 1.0 / (2.0 * scene.sigma * scene.sigma);
    std::vector<double> patch;
    for (const auto& d : scene.dots) {
        if (!(d.x >= 0.0 && d.x < scene.width && d.y >= 0.0 && d.y < scene.height))
            throw std::invalid_argument("render_density: dot outside grid bounds");
        const int cx = static_cast<int>(std::floor(d.x));
        const int cy = static_cast<int>(std::floor(d.y));
        const int y0 = std::max(0, cy - radius), y1 = std::min(scene.height - 1, cy + radius);
        const int x0 = std::max(0, cx - radius), x1 = std::min(scene.width - 1, cx + radius);
        patch.assign(static_cast<std::size_t>(y1 - y0 + 1) * (x1 - x0 + 1), 0.0);
        double s = 0.0;
        std::size_t k = 0;
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x, ++k) {
                double dy = y + 0.5 - d.y, dx = x + 0.5 - d.x;
                double r2 = dx * dx + dy * dy;
                double v = r2 <= double(radius) * radius ? std::exp(-r2 * inv2s2) : 0.0;
                patch[k] = v;
                s += v;
            }
        k = 0;
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x, ++k) out.at(y, x) += patch[k] / s;
    }
    return out;
}

/// Sum pooling by `factor`; the input is zero-padded up to a multiple of factor.
inline DensityGrid downsample_sum(const DensityGrid& grid, int factor) {
    if (factor < 1) throw std::invalid_argument("downsample_sum: factor must be >= 1");
    const int oh = (grid.height() + factor - 1) / factor;
    const int ow = (grid.width() + factor - 1) / factor;
    DensityGrid out(oh, ow);
    for (int y = 0; y < grid.height(); ++y)
        for (int x = 0; x < grid.width(); ++x) out.at(y / factor, x / factor) += grid.at(y, x);
    return out;
}

/// Nearest-neighbour label replication, cropped to the target size.
inline LabelMap upsample_labels(const LabelMap& labels, int factor, int target_h, int target_w) {
    if (factor < 1) throw std::invalid_argument("upsample_labels: factor must be >= 1");
    if (target_h > labels.height * factor || target_w > labels.width * factor ||
        target_h <= (labels.height - 1) * factor || target_w <= (labels.width - 1) * factor)
        throw std::invalid_argument("upsample_labels: target size inconsistent with factor");
    LabelMap out(target_h, target_w);
    for (int y = 0; y < target_h; ++y)
        for (int x = 0; x < target_w; ++x) out.at(y, x) = labels.at(y / factor, x / factor);
    return out;
}

/// Peak picking with non-maximum suppression: round(region mass) points, each
/// the densest unsuppressed pixel, suppressing everything closer than `radius`.
/// Points are pixel coordinates (x = column, y = row).
inline std::vector<Dot> place_dots(const DensityGrid& grid, std::span<const std::uint32_t> region, double radius) {
    if (region.empty()) throw std::invalid_argument("place_dots: empty region");
    const auto k = static_cast<std::size_t>(std::llround(std::max(0.0, grid.sum_over(region))));
    std::vector<std::uint32_t> order(region.begin(), region.end());
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return grid[a] > grid[b]; });
    std::vector<Dot> picked;
    const int w = grid.width();
    const double r2 = radius * radius;
    for (auto p : order) {
        if (picked.size() >= k) break;
        const double x = p % w, y = p / w;
        bool suppressed = std::any_of(picked.begin(), picked.end(), [&](const Dot& d) {
            return (d.x - x) * (d.x - x) + (d.y - y) * (d.y - y) < r2;
        });
        if (!suppressed) picked.push_back({x, y});
    }
    return picked;
}

}  // namespace icount
