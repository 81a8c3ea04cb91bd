#ifndef MPUNET_PREPROCESS_HPP
#define MPUNET_PREPROCESS_HPP

#include <algorithm>
#include <span>
#include <vector>

#include "mpunet/core/quantile.hpp"
#include "mpunet/volume.hpp"

namespace mpunet {

struct RobustStats {
    double threshold = 0.0; // 1st percentile of the channel
    double median = 0.0;    // over foreground voxels
    double iqr = 0.0;       // over foreground voxels
    std::size_t foreground = 0;
};

/// Foreground = voxels strictly above the channel's 1st percentile.
inline RobustStats robust_stats(const IntensityVolume& v, int channel = 0)
{
    const auto n = v.geom.voxel_count();
    std::vector<double> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = v.data[i * v.channels + channel];
    std::sort(all.begin(), all.end());
    RobustStats s;
    s.threshold = quantile_sorted(all, 0.01);
    const auto first_fg = std::upper_bound(all.begin(), all.end(), s.threshold);
    const std::span<const double> fg(&*all.begin() + (first_fg - all.begin()), static_cast<std::size_t>(all.end() - first_fg));
    s.foreground = fg.size();
    if (fg.empty()) return s;
    s.median = quantile_sorted(fg, 0.5);
    s.iqr = quantile_sorted(fg, 0.75) - quantile_sorted(fg, 0.25);
    return s;
}

/// Per channel: (x - median(F)) / IQR(F) applied to every voxel, with F the
/// foreground set defined above.
inline IntensityVolume robust_scale(const IntensityVolume& v)
{
    IntensityVolume out = v;
    for (int c = 0; c < v.channels; ++c) {
        const RobustStats s = robust_stats(v, c);
        if (s.foreground == 0 || !(s.iqr > 0.0)) throw NumericError("degenerate intensity distribution");
        const std::size_t n = v.geom.voxel_count();
        for (std::size_t i = 0; i < n; ++i) {
            auto& x = out.data[i * v.channels + c];
            x = static_cast<float>((static_cast<double>(x) - s.median) / s.iqr);
        }
    }
    return out;
}

} // namespace mpunet

#endif // MPUNET_PREPROCESS_HPP
