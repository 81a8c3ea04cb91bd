#ifndef MPUNET_PHANTOM_HPP
#define MPUNET_PHANTOM_HPP

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "mpunet/core/rng.hpp"
#include "mpunet/volume.hpp"

namespace mpunet {

/// Concentric ellipsoidal shells standing in for labelled scans.
struct PhantomSpec {
    std::array<int, 3> shape{48, 48, 48};
    Vec3 spacing{1.0, 1.0, 1.0};
    int num_classes = 3;
    std::vector<double> shell_radii{0.5, 0.7, 0.9}; // fractions of the half-extent, one per class
    double noise_sigma = 0.3;
    double intensity_step = 1.0; // base level of class c is c * intensity_step
    Vec3 axis_scale{1.0, 1.0, 1.0};
    Vec3 center_offset{0.0, 0.0, 0.0}; // mm
    std::uint64_t seed = 0;

    void validate() const
    {
        if (num_classes < 1 || num_classes > 255) throw UsageError("phantom needs 1..255 classes");
        if (static_cast<int>(shell_radii.size()) != num_classes)
            throw UsageError("phantom needs one shell radius per class");
        double prev = 0.0;
        for (double r : shell_radii) {
            if (!(r > prev) || r > 1.0) throw UsageError("shell radii must be strictly increasing in (0, 1]");
            prev = r;
        }
        if (noise_sigma < 0.0) throw UsageError("noise_sigma must be non-negative");
        for (double s : axis_scale)
            if (!(s > 0.0)) throw UsageError("axis_scale must be positive");
        Geometry{shape, spacing, {}}.validate();
    }
};

/// Evenly spaced radii from 0.5 to 0.9 (a single class gets 0.9).
inline std::vector<double> default_shell_radii(int num_classes)
{
    std::vector<double> r(static_cast<std::size_t>(num_classes));
    for (int c = 0; c < num_classes; ++c)
        r[c] = num_classes == 1 ? 0.9 : 0.5 + 0.4 * c / static_cast<double>(num_classes - 1);
    return r;
}

/// Normalised ellipsoidal radius of voxel (i, j, l) under `spec`.
inline double phantom_radius(const PhantomSpec& spec, int i, int j, int l)
{
    const std::array<int, 3> idx{i, j, l};
    double r2 = 0.0;
    for (int a = 0; a < 3; ++a) {
        const double half = 0.5 * (spec.shape[a] - 1) * spec.spacing[a];
        const double offset = idx[a] * spec.spacing[a] - half - spec.center_offset[a];
        const double q = offset / (half * spec.axis_scale[a]);
        r2 += q * q;
    }
    return std::sqrt(r2);
}

inline std::pair<IntensityVolume, LabelVolume> make_phantom(const PhantomSpec& spec)
{
    spec.validate();
    const Geometry g{spec.shape, spec.spacing, {0.0, 0.0, 0.0}};
    IntensityVolume img(g);
    LabelVolume lab(g, 1, spec.num_classes);
    Rng rng(spec.seed);
    for (int i = 0; i < g.shape[0]; ++i)
        for (int j = 0; j < g.shape[1]; ++j)
            for (int l = 0; l < g.shape[2]; ++l) {
                const double r = phantom_radius(spec, i, j, l);
                int cls = 0;
                for (int c = spec.num_classes; c >= 1; --c)
                    if (r <= spec.shell_radii[c - 1]) cls = c;
                const double noise = spec.noise_sigma > 0.0 ? spec.noise_sigma * normal(rng) : 0.0;
                lab.at(i, j, l) = static_cast<std::uint8_t>(cls);
                img.at(i, j, l) = static_cast<float>(cls * spec.intensity_step + noise);
            }
    return {std::move(img), std::move(lab)};
}

/// Per-subject variation of a base spec: axis scales in [0.8, 1], a centre
/// shift of up to two voxels per axis, and an independent noise seed.
inline PhantomSpec phantom_variation(const PhantomSpec& base, std::uint64_t subject)
{
    PhantomSpec s = base;
    Rng rng(derive_seed(base.seed, subject));
    for (int a = 0; a < 3; ++a) s.axis_scale[a] = uniform(rng, 0.8, 1.0);
    for (int a = 0; a < 3; ++a) s.center_offset[a] = uniform(rng, -2.0, 2.0) * base.spacing[a];
    s.seed = rng();
    return s;
}

} // namespace mpunet

#endif // MPUNET_PHANTOM_HPP
