#ifndef MPUNET_CORE_QUANTILE_HPP
#define MPUNET_CORE_QUANTILE_HPP

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

namespace mpunet {

/// Quantile of already-sorted data by linear interpolation between order
/// statistics: h = (n-1)q, result = x[floor h] + frac(h) * (x[floor h + 1] - x[floor h]).
/// Shared by intensity preprocessing and the box-whisker summaries.
inline double quantile_sorted(std::span<const double> sorted, double q)
{
    if (sorted.empty()) throw std::invalid_argument("quantile of empty sample");
    if (q <= 0.0) return sorted.front();
    if (q >= 1.0) return sorted.back();
    const double h = static_cast<double>(sorted.size() - 1) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const double frac = h - static_cast<double>(lo);
    if (lo + 1 >= sorted.size()) return sorted[lo];
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

inline double quantile(std::vector<double> values, double q)
{
    std::sort(values.begin(), values.end());
    return quantile_sorted(values, q);
}

} // namespace mpunet

#endif // MPUNET_CORE_QUANTILE_HPP
