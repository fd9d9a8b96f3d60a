#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <vector>

namespace testing_util {

/// argmin_u 1/2 (u - z)^2 + t |u| by a 1e-3 grid scan over [-4, 4] followed by
/// golden-section refinement around the best grid point.
inline double grid_argmin(double z, double t) {
    auto f = [&](double u) { return 0.5 * (u - z) * (u - z) + t * std::abs(u); };
    double best = 0, bestv = f(0.0);
    for (int i = -4000; i <= 4000; ++i) {
        const double u = i * 1e-3;
        if (f(u) < bestv) bestv = f(u), best = u;
    }
    double lo = best - 1e-3, hi = best + 1e-3;
    for (int it = 0; it < 100; ++it) {
        const double a = lo + (hi - lo) * 0.381966, b = hi - (hi - lo) * 0.381966;
        if (f(a) < f(b)) hi = b;
        else lo = a;
    }
    const double mid = 0.5 * (lo + hi);
    return f(0.0) <= f(mid) ? 0.0 : mid;
}

/// Best N-subset of a block by total magnitude over all C(M, N) subsets;
/// lexicographically smallest index set on ties.
inline std::vector<std::size_t> brute_force_nm(const std::vector<double>& block, std::size_t n) {
    const std::size_t m = block.size();
    std::vector<std::size_t> best;
    double best_sum = -1;
    for (std::uint32_t bits = 0; bits < (1u << m); ++bits) {
        if (std::size_t(std::popcount(bits)) != n) continue;
        std::vector<std::size_t> idx;
        double s = 0;
        for (std::size_t k = 0; k < m; ++k)
            if (bits >> k & 1u) {
                idx.push_back(k);
                s += std::abs(block[k]);
            }
        if (s > best_sum + 1e-12 || (std::abs(s - best_sum) <= 1e-12 && idx < best)) {
            best_sum = s;
            best = idx;
        }
    }
    return best;
}

}  // namespace testing_util
