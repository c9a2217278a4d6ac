#pragma once

// Fixture builders and independent reference computations shared by the tests.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "icount/grid.hpp"

namespace testing_support {

using icount::DensityGrid;

/// Isotropic Gaussian of the given mass, evaluated at pixel centres and normalized on the grid.
inline DensityGrid gaussian_blob(int h, int w, double cx, double cy, double sigma, double mass) {
    DensityGrid g(h, w);
    double s = 0.0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const double dx = x - cx, dy = y - cy;
            g.at(y, x) = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
            s += g.at(y, x);
        }
    for (auto& v : g.values()) v *= mass / s;
    return g;
}

inline DensityGrid add(DensityGrid a, const DensityGrid& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    return a;
}

/// Sparse random field: a handful of blobs plus optional speckle, scaled to `total`.
inline DensityGrid random_field(std::mt19937_64& rng, int h, int w, double total) {
    DensityGrid g(h, w);
    if (total <= 0.0) return g;
    std::uniform_int_distribution<int> nblobs(1, 12);
    std::uniform_real_distribution<double> ux(0, w - 1), uy(0, h - 1), us(0.7, 3.0), um(0.2, 2.0);
    const int n = nblobs(rng);
    for (int i = 0; i < n; ++i) g = add(std::move(g), gaussian_blob(h, w, ux(rng), uy(rng), us(rng), um(rng)));
    std::bernoulli_distribution speckle(0.05);
    std::uniform_real_distribution<double> sv(0.0, 0.05);
    for (auto& v : g.values())
        if (speckle(rng)) v += sv(rng);
    const double s = g.total();
    for (auto& v : g.values()) v *= total / s;
    return g;
}

inline std::vector<std::uint32_t> all_pixels(const DensityGrid& g) {
    std::vector<std::uint32_t> px(g.size());
    for (std::uint32_t i = 0; i < px.size(); ++i) px[i] = i;
    return px;
}

}  // namespace testing_support
