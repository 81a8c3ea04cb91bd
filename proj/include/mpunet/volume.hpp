#ifndef MPUNET_VOLUME_HPP
#define MPUNET_VOLUME_HPP

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "mpunet/core/error.hpp"
#include "mpunet/core/vec3.hpp"

namespace mpunet {

enum class VolumeKind { intensity, label };

/// Voxel grid placement in physical space (millimetres).
/// Voxel (i, j, l) sits at origin + (i*s0, j*s1, l*s2); index 2 varies fastest.
struct Geometry {
    std::array<int, 3> shape{0, 0, 0};
    Vec3 spacing{1.0, 1.0, 1.0};
    Vec3 origin{0.0, 0.0, 0.0};

    std::size_t voxel_count() const
    {
        return static_cast<std::size_t>(shape[0]) * static_cast<std::size_t>(shape[1]) *
               static_cast<std::size_t>(shape[2]);
    }

    std::size_t index(int i, int j, int l) const
    {
        return (static_cast<std::size_t>(i) * static_cast<std::size_t>(shape[1]) + static_cast<std::size_t>(j)) *
                   static_cast<std::size_t>(shape[2]) +
               static_cast<std::size_t>(l);
    }

    Vec3 point(int i, int j, int l) const
    {
        return {origin[0] + i * spacing[0], origin[1] + j * spacing[1], origin[2] + l * spacing[2]};
    }

    /// Continuous voxel coordinates of a physical point.
    Vec3 to_index(const Vec3& p) const
    {
        return {(p[0] - origin[0]) / spacing[0], (p[1] - origin[1]) / spacing[1], (p[2] - origin[2]) / spacing[2]};
    }

    /// Physical centre of the voxel-centre bounding box.
    Vec3 center() const
    {
        return {origin[0] + 0.5 * (shape[0] - 1) * spacing[0], origin[1] + 0.5 * (shape[1] - 1) * spacing[1],
                origin[2] + 0.5 * (shape[2] - 1) * spacing[2]};
    }

    void validate() const
    {
        for (int a = 0; a < 3; ++a) {
            if (shape[a] <= 0) throw DataError("volume shape must be positive");
            if (!(spacing[a] > 0.0)) throw DataError("voxel spacing must be strictly positive");
        }
    }

    friend bool operator==(const Geometry&, const Geometry&) = default;
};

/// A 3D grid of intensities (float) or class labels (uint8). Channels, when
/// more than one, are interleaved as the fastest-varying axis.
template <typename T>
struct Volume {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, std::uint8_t>);
    static constexpr VolumeKind kind = std::is_same_v<T, float> ? VolumeKind::intensity : VolumeKind::label;

    Geometry geom;
    int channels = 1;
    int num_classes = 0; // K; labels take values in {0..K}. Unused for intensities.
    std::vector<T> data;

    Volume() = default;
    explicit Volume(const Geometry& g, int channel_count = 1, int classes = 0)
        : geom(g), channels(channel_count), num_classes(classes), data(g.voxel_count() * channel_count, T{})
    {
        g.validate();
    }

    T& at(int i, int j, int l, int c = 0) { return data[geom.index(i, j, l) * channels + c]; }
    const T& at(int i, int j, int l, int c = 0) const { return data[geom.index(i, j, l) * channels + c]; }

    friend bool operator==(const Volume&, const Volume&) = default;
};

using IntensityVolume = Volume<float>;
using LabelVolume = Volume<std::uint8_t>;

inline void require_same_shape(const Geometry& a, const Geometry& b, const char* what)
{
    if (a.shape != b.shape) throw DataError(std::string(what) + ": shape mismatch");
}

struct ClassCounts {
    std::size_t true_positive = 0;
    std::size_t false_positive = 0;
    std::size_t false_negative = 0;
};

inline ClassCounts confusion(const LabelVolume& pred, const LabelVolume& truth, int cls)
{
    require_same_shape(pred.geom, truth.geom, "confusion");
    ClassCounts out;
    for (std::size_t n = 0; n < pred.data.size(); ++n) {
        const bool p = pred.data[n] == cls;
        const bool t = truth.data[n] == cls;
        out.true_positive += p && t;
        out.false_positive += p && !t;
        out.false_negative += !p && t;
    }
    return out;
}

/// 2|P∩T| / (|P| + |T|); 1.0 when the class is absent from both volumes.
inline double dice(const LabelVolume& pred, const LabelVolume& truth, int cls)
{
    const ClassCounts c = confusion(pred, truth, cls);
    const std::size_t denom = 2 * c.true_positive + c.false_positive + c.false_negative;
    if (denom == 0) return 1.0;
    return 2.0 * static_cast<double>(c.true_positive) / static_cast<double>(denom);
}

/// True when the class occurs in either volume, i.e. its Dice is informative.
inline bool class_present(const LabelVolume& pred, const LabelVolume& truth, int cls)
{
    const ClassCounts c = confusion(pred, truth, cls);
    return c.true_positive + c.false_positive + c.false_negative > 0;
}

/// FP and FN counts summed along one axis; maps are row-major over the two
/// remaining axes in increasing axis order.
struct ErrorProjection {
    int rows = 0;
    int cols = 0;
    std::vector<std::uint32_t> false_positive;
    std::vector<std::uint32_t> false_negative;

    std::uint32_t fp(int r, int c) const { return false_positive[static_cast<std::size_t>(r) * cols + c]; }
    std::uint32_t fn(int r, int c) const { return false_negative[static_cast<std::size_t>(r) * cols + c]; }
};

inline ErrorProjection fp_fn_projection(const LabelVolume& pred, const LabelVolume& truth, int cls, int axis)
{
    require_same_shape(pred.geom, truth.geom, "fp_fn_projection");
    if (axis < 0 || axis > 2) throw UsageError("projection axis must be 0, 1 or 2");
    const auto& s = pred.geom.shape;
    const int a = axis == 0 ? 1 : 0;
    const int b = axis == 2 ? 1 : 2;
    ErrorProjection out;
    out.rows = s[a];
    out.cols = s[b];
    out.false_positive.assign(static_cast<std::size_t>(out.rows) * out.cols, 0);
    out.false_negative.assign(out.false_positive.size(), 0);
    for (int i = 0; i < s[0]; ++i)
        for (int j = 0; j < s[1]; ++j)
            for (int l = 0; l < s[2]; ++l) {
                const std::array<int, 3> idx{i, j, l};
                const std::size_t n = pred.geom.index(i, j, l);
                const bool p = pred.data[n] == cls;
                const bool t = truth.data[n] == cls;
                const std::size_t cell = static_cast<std::size_t>(idx[a]) * out.cols + idx[b];
                out.false_positive[cell] += p && !t;
                out.false_negative[cell] += !p && t;
            }
    return out;
}

} // namespace mpunet

#endif // MPUNET_VOLUME_HPP
