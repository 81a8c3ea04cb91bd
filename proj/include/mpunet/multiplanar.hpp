#ifndef MPUNET_MULTIPLANAR_HPP
#define MPUNET_MULTIPLANAR_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mpunet/core/error.hpp"
#include "mpunet/core/rng.hpp"
#include "mpunet/core/vec3.hpp"
#include "mpunet/volume.hpp"
#include "mpunet/volume_io.hpp"

namespace mpunet {

/// Class-probability volume: an intensity volume whose channels are classes.
using ProbVolume = IntensityVolume;

// ---------------------------------------------------------------------------
// View vectors

/// View vectors plus, per vector, two in-plane axes (row, col) such that
/// (vector, row, col) is a right-handed orthonormal frame.
struct PlaneSet {
    std::vector<Vec3> vectors;
    std::vector<std::array<Vec3, 2>> bases;
    std::uint64_t seed = 0;
    double min_angle_deg = 60.0;

    std::size_t size() const { return vectors.size(); }
};

/// Sagittal slices are normal to the first (left-right) voxel axis.
inline constexpr Vec3 sagittal_axis{1.0, 0.0, 0.0};

/// Angle between the lines spanned by two unit vectors, in degrees.
inline double line_angle_deg(const Vec3& a, const Vec3& b)
{
    const double c = std::min(1.0, std::abs(dot(a, b)));
    return std::acos(c) * 180.0 / std::numbers::pi;
}

/// Gram-Schmidt against the least-aligned canonical axis (lowest index on ties).
inline std::array<Vec3, 2> in_plane_basis(const Vec3& v)
{
    int axis = 0;
    for (int a = 1; a < 3; ++a)
        if (std::abs(v[a]) < std::abs(v[axis])) axis = a;
    Vec3 e{0.0, 0.0, 0.0};
    e[axis] = 1.0;
    const Vec3 row = normalized(e - dot(e, v) * v);
    const Vec3 col = cross(v, row);
    return {row, col};
}

namespace detail {

inline std::vector<Vec3> reference_lines(int k)
{
    if (k == 3) return {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    // The six icosahedron diagonals: pairwise line angle acos(1/sqrt 5) ~ 63.43 deg.
    const double phi = std::numbers::phi;
    std::vector<Vec3> v{{0, 1, phi}, {0, -1, phi}, {1, phi, 0}, {-1, phi, 0}, {phi, 0, 1}, {-phi, 0, 1}};
    for (auto& x : v) x = normalized(x);
    return v;
}

inline double min_pairwise_angle(const std::vector<Vec3>& v)
{
    double m = 180.0;
    for (std::size_t a = 0; a < v.size(); ++a)
        for (std::size_t b = a + 1; b < v.size(); ++b) m = std::min(m, line_angle_deg(v[a], v[b]));
    return m;
}

/// Rotation taking a uniformly random quaternion.
inline std::array<Vec3, 3> random_rotation(Rng& rng)
{
    double q[4];
    double n = 0.0;
    do {
        n = 0.0;
        for (double& x : q) {
            x = normal(rng);
            n += x * x;
        }
    } while (n < 1e-12);
    n = std::sqrt(n);
    const double w = q[0] / n, x = q[1] / n, y = q[2] / n, z = q[3] / n;
    return {Vec3{1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)},
            Vec3{2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)},
            Vec3{2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)}};
}

/// Uniform direction within a spherical cap of half-angle `cap_deg` around `v`.
inline Vec3 jitter_in_cap(const Vec3& v, double cap_deg, Rng& rng)
{
    const double cos_cap = std::cos(cap_deg * std::numbers::pi / 180.0);
    const double c = 1.0 - uniform01(rng) * (1.0 - cos_cap);
    const double s = std::sqrt(std::max(0.0, 1.0 - c * c));
    const double phi = 2.0 * std::numbers::pi * uniform01(rng);
    const auto [a, b] = in_plane_basis(v);
    return normalized(c * v + (s * std::cos(phi)) * a + (s * std::sin(phi)) * b);
}

} // namespace detail

/// k = 1 gives the sagittal axis. For k in {3, 6} each attempt rotates a
/// maximally separated reference set of lines uniformly at random, jitters
/// every line inside a cap, and is rejected unless all pairwise line angles
/// reach `min_angle_deg`. Independent uniform draws almost never pack six
/// lines 60 degrees apart, hence the reference sets.
inline PlaneSet sample_plane_set(int k, std::uint64_t seed, double min_angle_deg = 60.0, int max_attempts = 10000)
{
    if (k != 1 && k != 3 && k != 6) throw UsageError("number of planes must be 1, 3 or 6");
    PlaneSet ps;
    ps.seed = seed;
    ps.min_angle_deg = min_angle_deg;
    if (k == 1) {
        ps.vectors = {sagittal_axis};
    }
    else {
        const auto ref = detail::reference_lines(k);
        const double ref_angle = detail::min_pairwise_angle(ref);
        const double cap = ref_angle > min_angle_deg ? 0.75 * (ref_angle - min_angle_deg) : 0.5;
        Rng rng(seed);
        bool ok = false;
        for (int attempt = 0; attempt < max_attempts && !ok; ++attempt) {
            const auto rot = detail::random_rotation(rng);
            std::vector<Vec3> cand;
            for (const auto& r : ref) {
                const Vec3 rotated{dot(rot[0], r), dot(rot[1], r), dot(rot[2], r)};
                cand.push_back(detail::jitter_in_cap(normalized(rotated), cap, rng));
            }
            if (detail::min_pairwise_angle(cand) >= min_angle_deg) {
                ps.vectors = std::move(cand);
                ok = true;
            }
        }
        if (!ok)
            throw NumericError("plane sampler exceeded its retry budget: " + std::to_string(k) +
                               " lines with pairwise angle >= " + std::to_string(min_angle_deg) +
                               " deg look infeasible");
    }
    for (const auto& v : ps.vectors) ps.bases.push_back(in_plane_basis(v));
    return ps;
}

// ---------------------------------------------------------------------------
// Slice grids

/// Regular isotropic lattice of sample points: `slices` planes normal to
/// `view`, each a rows x cols grid spanned by (row_axis, col_axis), all
/// centred on `center`.
struct SliceGrid {
    Vec3 view{1, 0, 0};
    Vec3 row_axis{0, 1, 0};
    Vec3 col_axis{0, 0, 1};
    Vec3 center{0, 0, 0};
    double spacing = 1.0;
    int slices = 0;
    int rows = 0;
    int cols = 0;

    std::size_t pixel_count() const
    {
        return static_cast<std::size_t>(slices) * static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
    }

    std::size_t index(int s, int r, int c) const
    {
        return (static_cast<std::size_t>(s) * rows + static_cast<std::size_t>(r)) * cols + static_cast<std::size_t>(c);
    }

    Vec3 point(int s, int r, int c) const
    {
        const double ts = (s - 0.5 * (slices - 1)) * spacing;
        const double tr = (r - 0.5 * (rows - 1)) * spacing;
        const double tc = (c - 0.5 * (cols - 1)) * spacing;
        return center + ts * view + tr * row_axis + tc * col_axis;
    }
};

struct SliceStack {
    SliceGrid grid;
    int view_index = 0;
    int channels = 1;
    std::vector<float> images;         // slices x rows x cols x channels
    std::vector<std::uint8_t> labels;  // slices x rows x cols, empty when unlabelled
    std::vector<Vec3> grid_points;     // physical position of every pixel

    bool has_labels() const { return !labels.empty(); }
    std::size_t slice_pixels() const { return static_cast<std::size_t>(grid.rows) * grid.cols; }
};

/// Number of lattice points needed along `axis` to span the voxel-centre
/// bounding box of `g`.
inline int lattice_extent(const Geometry& g, const Vec3& axis, double spacing)
{
    double extent = 0.0;
    for (int a = 0; a < 3; ++a) extent += std::abs(axis[a]) * (g.shape[a] - 1) * g.spacing[a];
    return static_cast<int>(std::floor(extent / spacing + 1e-9)) + 1;
}

inline SliceGrid make_slice_grid(const Geometry& g, const PlaneSet& ps, int view_index, std::array<int, 2> target_size,
                                 double grid_spacing)
{
    if (view_index < 0 || view_index >= static_cast<int>(ps.size())) throw UsageError("view index out of range");
    if (!(grid_spacing > 0.0)) throw UsageError("grid spacing must be positive");
    SliceGrid grid;
    grid.view = ps.vectors[view_index];
    grid.row_axis = ps.bases[view_index][0];
    grid.col_axis = ps.bases[view_index][1];
    grid.center = g.center();
    grid.spacing = grid_spacing;
    grid.slices = lattice_extent(g, grid.view, grid_spacing);
    grid.rows = target_size[0] > 0 ? target_size[0] : lattice_extent(g, grid.row_axis, grid_spacing);
    grid.cols = target_size[1] > 0 ? target_size[1] : lattice_extent(g, grid.col_axis, grid_spacing);
    if (grid.rows <= 0 || grid.cols <= 0) throw UsageError("target size must be positive");
    return grid;
}

namespace detail {

/// Continuous voxel index inside the hull of voxel centres, or nullopt.
inline std::optional<Vec3> hull_index(const Geometry& g, const Vec3& p)
{
    Vec3 x = g.to_index(p);
    for (int a = 0; a < 3; ++a) {
        const double hi = g.shape[a] - 1;
        if (x[a] < -1e-9 || x[a] > hi + 1e-9) return std::nullopt;
        x[a] = std::clamp(x[a], 0.0, hi);
    }
    return x;
}

} // namespace detail

/// Trilinear sample of channel `c`; 0 outside the hull of voxel centres.
inline float sample_trilinear(const IntensityVolume& v, const Vec3& p, int c = 0)
{
    const auto x = detail::hull_index(v.geom, p);
    if (!x) return 0.0f;
    int i0[3];
    double t[3];
    for (int a = 0; a < 3; ++a) {
        i0[a] = std::min(static_cast<int>(std::floor((*x)[a])), v.geom.shape[a] - 2);
        t[a] = (*x)[a] - i0[a];
    }
    double acc = 0.0;
    for (int dz = 0; dz < 2; ++dz)
        for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
                const double w = (dz ? t[0] : 1 - t[0]) * (dy ? t[1] : 1 - t[1]) * (dx ? t[2] : 1 - t[2]);
                if (w != 0.0) acc += w * v.at(i0[0] + dz, i0[1] + dy, i0[2] + dx, c);
            }
    return static_cast<float>(acc);
}

/// Nearest-voxel label; 0 outside the hull of voxel centres.
inline std::uint8_t sample_nearest(const LabelVolume& v, const Vec3& p)
{
    const auto x = detail::hull_index(v.geom, p);
    if (!x) return 0;
    int idx[3];
    for (int a = 0; a < 3; ++a)
        idx[a] = std::clamp(static_cast<int>(std::floor((*x)[a] + 0.5)), 0, v.geom.shape[a] - 1);
    return v.at(idx[0], idx[1], idx[2]);
}

/// Resamples `v` (and `labels`, when given) on the slice lattice of one view.
/// `target_size` = {rows, cols}; a zero entry spans the full bounding box.
inline SliceStack extract_slices(const IntensityVolume& v, const LabelVolume* labels, const PlaneSet& ps,
                                 int view_index, std::array<int, 2> target_size, double grid_spacing)
{
    for (int a = 0; a < 3; ++a)
        if (v.geom.shape[a] < 2) throw DataError("degenerate volume: every dimension needs at least 2 voxels");
    if (labels) require_same_shape(v.geom, labels->geom, "extract_slices");
    SliceStack st;
    st.grid = make_slice_grid(v.geom, ps, view_index, target_size, grid_spacing);
    st.view_index = view_index;
    st.channels = v.channels;
    const std::size_t n = st.grid.pixel_count();
    st.images.resize(n * v.channels);
    st.grid_points.resize(n);
    if (labels) st.labels.resize(n);
    for (int s = 0; s < st.grid.slices; ++s)
        for (int r = 0; r < st.grid.rows; ++r)
            for (int c = 0; c < st.grid.cols; ++c) {
                const std::size_t k = st.grid.index(s, r, c);
                const Vec3 p = st.grid.point(s, r, c);
                st.grid_points[k] = p;
                for (int ch = 0; ch < v.channels; ++ch) st.images[k * v.channels + ch] = sample_trilinear(v, p, ch);
                if (labels) st.labels[k] = sample_nearest(*labels, p);
            }
    return st;
}

inline SliceStack extract_slices(const IntensityVolume& v, const PlaneSet& ps, int view_index,
                                 std::array<int, 2> target_size, double grid_spacing)
{
    return extract_slices(v, nullptr, ps, view_index, target_size, grid_spacing);
}

/// Nearest lattice coordinate along one axis; exact half-way ties go low.
inline int nearest_lattice_coord(double x)
{
    const double f = std::floor(x);
    return (x - f) > 0.5 ? static_cast<int>(f) + 1 : static_cast<int>(f);
}

/// Assigns every voxel of `target` the class-probability vector of its
/// nearest lattice point (physical distance). Voxels more than one grid step
/// from every lattice point become background one-hot.
/// `predictions` holds grid.pixel_count() x classes values, class fastest.
inline ProbVolume map_back(std::span<const float> predictions, int classes, const SliceGrid& grid,
                           const Geometry& target)
{
    if (grid.pixel_count() == 0) throw DataError("map_back: empty slice stack");
    if (classes < 1 || predictions.size() != grid.pixel_count() * static_cast<std::size_t>(classes))
        throw DataError("map_back: predictions do not match the slice geometry");
    ProbVolume out(target, classes);
    const double g = grid.spacing;
    const double tol = g * (1.0 + 1e-9);
    for (int i = 0; i < target.shape[0]; ++i)
        for (int j = 0; j < target.shape[1]; ++j)
            for (int l = 0; l < target.shape[2]; ++l) {
                const Vec3 q = target.point(i, j, l) - grid.center;
                const int s = std::clamp(nearest_lattice_coord(dot(q, grid.view) / g + 0.5 * (grid.slices - 1)), 0,
                                         grid.slices - 1);
                const int r = std::clamp(nearest_lattice_coord(dot(q, grid.row_axis) / g + 0.5 * (grid.rows - 1)), 0,
                                         grid.rows - 1);
                const int c = std::clamp(nearest_lattice_coord(dot(q, grid.col_axis) / g + 0.5 * (grid.cols - 1)), 0,
                                         grid.cols - 1);
                float* dst = &out.at(i, j, l, 0);
                if (norm(target.point(i, j, l) - grid.point(s, r, c)) > tol) {
                    dst[0] = 1.0f;
                    continue;
                }
                const float* src = predictions.data() + grid.index(s, r, c) * classes;
                std::copy(src, src + classes, dst);
            }
    return out;
}

/// One-hot encoding of a label stack, for round-trip checks.
inline std::vector<float> one_hot(std::span<const std::uint8_t> labels, int classes)
{
    std::vector<float> out(labels.size() * static_cast<std::size_t>(classes), 0.0f);
    for (std::size_t k = 0; k < labels.size(); ++k) out[k * classes + labels[k]] = 1.0f;
    return out;
}

/// Per-voxel argmax; ties resolve to the lowest class index.
inline LabelVolume argmax_labels(const ProbVolume& p)
{
    LabelVolume out(p.geom, 1, p.channels - 1);
    const std::size_t n = p.geom.voxel_count();
    for (std::size_t v = 0; v < n; ++v) {
        const float* row = &p.data[v * p.channels];
        int best = 0;
        for (int c = 1; c < p.channels; ++c)
            if (row[c] > row[best]) best = c;
        out.data[v] = static_cast<std::uint8_t>(best);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Debug export

inline nlohmann::json grid_to_json(const SliceGrid& g, int view_index)
{
    auto v3 = [](const Vec3& v) { return nlohmann::json::array({v[0], v[1], v[2]}); };
    return {{"view_index", view_index}, {"view", v3(g.view)},       {"row_axis", v3(g.row_axis)},
            {"col_axis", v3(g.col_axis)}, {"center", v3(g.center)},  {"spacing", g.spacing},
            {"slices", g.slices},         {"rows", g.rows},          {"cols", g.cols}};
}

/// Writes one 2D container per slice (`slice_XXXX_img.mvh`, plus `_lab` when
/// labelled) and `geometry.json`.
inline void export_slice_stack(const SliceStack& st, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    const std::size_t per = st.slice_pixels();
    for (int s = 0; s < st.grid.slices; ++s) {
        char name[64];
        Geometry g2{{st.grid.rows, st.grid.cols, 1}, {st.grid.spacing, st.grid.spacing, st.grid.spacing}, {}};
        IntensityVolume img(g2, st.channels);
        std::copy_n(st.images.begin() + static_cast<std::ptrdiff_t>(s * per * st.channels), per * st.channels,
                    img.data.begin());
        std::snprintf(name, sizeof name, "slice_%04d_img.mvh", s);
        save_volume(img, dir / name);
        if (st.has_labels()) {
            int k = 0;
            for (std::size_t q = 0; q < per; ++q) k = std::max<int>(k, st.labels[s * per + q]);
            LabelVolume lab(g2, 1, k);
            std::copy_n(st.labels.begin() + static_cast<std::ptrdiff_t>(s * per), per, lab.data.begin());
            std::snprintf(name, sizeof name, "slice_%04d_lab.mvh", s);
            save_volume(lab, dir / name);
        }
    }
    std::ofstream(dir / "geometry.json") << grid_to_json(st.grid, st.view_index).dump(2) << '\n';
}

} // namespace mpunet

#endif // MPUNET_MULTIPLANAR_HPP
