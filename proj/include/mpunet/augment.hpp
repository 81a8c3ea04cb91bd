#ifndef MPUNET_AUGMENT_HPP
#define MPUNET_AUGMENT_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "mpunet/core/error.hpp"
#include "mpunet/core/rng.hpp"

namespace mpunet {

/// Random elastic deformation settings. `smoothing_range` is the Gaussian
/// width in pixels; `magnitude_range` multiplies the unit-normalised field,
/// and the result is divided by the image width.
struct ElasticParams {
    std::array<double, 2> smoothing_range{20.0, 30.0};
    std::array<double, 2> magnitude_range{0.0, 450.0};
    double probability = 1.0 / 3.0;

    void validate() const
    {
        for (const auto& r : {smoothing_range, magnitude_range})
            if (r[0] < 0.0 || r[1] < r[0]) throw UsageError("elastic ranges must be non-negative and ordered");
        if (probability < 0.0 || probability > 1.0) throw UsageError("elastic probability must lie in [0, 1]");
    }
};

/// A 2D slice: rows x cols pixels, channels interleaved last.
template <typename T>
struct Image2D {
    int rows = 0;
    int cols = 0;
    int channels = 1;
    std::vector<T> data;

    T& at(int r, int c, int ch = 0) { return data[(static_cast<std::size_t>(r) * cols + c) * channels + ch]; }
    const T& at(int r, int c, int ch = 0) const
    {
        return data[(static_cast<std::size_t>(r) * cols + c) * channels + ch];
    }
    friend bool operator==(const Image2D&, const Image2D&) = default;
};

namespace detail {

/// Mirror index into [0, n) for arbitrarily distant offsets.
inline int reflect_index(int i, int n)
{
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - i;
}

inline std::vector<double> gaussian_kernel(double sigma)
{
    if (sigma <= 0.0) return {1.0};
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& x : k) x /= sum;
    return k;
}

inline void smooth_separable(std::vector<double>& field, int rows, int cols, double sigma)
{
    const auto k = gaussian_kernel(sigma);
    const int radius = static_cast<int>(k.size() / 2);
    std::vector<double> tmp(field.size());
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            double acc = 0.0;
            for (int t = -radius; t <= radius; ++t) acc += k[t + radius] * field[r * cols + reflect_index(c + t, cols)];
            tmp[r * cols + c] = acc;
        }
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            double acc = 0.0;
            for (int t = -radius; t <= radius; ++t) acc += k[t + radius] * tmp[reflect_index(r + t, rows) * cols + c];
            field[r * cols + c] = acc;
        }
}

} // namespace detail

struct ElasticDraw {
    bool applied = false;
    double smoothing = 0.0;
    double magnitude = 0.0;
};

/// Displacement field (row, col components, in pixels) for one draw.
inline std::array<std::vector<double>, 2> elastic_field(int rows, int cols, double smoothing, double magnitude,
                                                        Rng& rng)
{
    const std::size_t n = static_cast<std::size_t>(rows) * cols;
    std::array<std::vector<double>, 2> d{std::vector<double>(n), std::vector<double>(n)};
    for (auto& comp : d)
        for (auto& x : comp) x = uniform(rng, -1.0, 1.0);
    for (auto& comp : d) detail::smooth_separable(comp, rows, cols, smoothing);
    double peak = 0.0;
    for (std::size_t i = 0; i < n; ++i) peak = std::max(peak, std::hypot(d[0][i], d[1][i]));
    const double scale = peak > 0.0 ? magnitude / (peak * cols) : 0.0;
    for (auto& comp : d)
        for (auto& x : comp) x *= scale;
    return d;
}

/// Warps `image` bilinearly and `label` by nearest neighbour along the same
/// field; both clamp at the border so no new label values appear.
template <typename L>
std::pair<Image2D<float>, Image2D<L>> warp(const Image2D<float>& image, const Image2D<L>& label,
                                          const std::array<std::vector<double>, 2>& disp)
{
    auto out_img = image;
    auto out_lab = label;
    const int rows = image.rows, cols = image.cols;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            const std::size_t k = static_cast<std::size_t>(r) * cols + c;
            const double y = std::clamp(r + disp[0][k], 0.0, rows - 1.0);
            const double x = std::clamp(c + disp[1][k], 0.0, cols - 1.0);
            const int y0 = std::min(static_cast<int>(std::floor(y)), std::max(rows - 2, 0));
            const int x0 = std::min(static_cast<int>(std::floor(x)), std::max(cols - 2, 0));
            const double ty = y - y0, tx = x - x0;
            const int y1 = std::min(y0 + 1, rows - 1), x1 = std::min(x0 + 1, cols - 1);
            for (int ch = 0; ch < image.channels; ++ch) {
                double v = (1 - ty) * (1 - tx) * image.at(y0, x0, ch);
                if (tx != 0.0) v += (1 - ty) * tx * image.at(y0, x1, ch);
                if (ty != 0.0) v += ty * (1 - tx) * image.at(y1, x0, ch);
                if (tx != 0.0 && ty != 0.0) v += ty * tx * image.at(y1, x1, ch);
                out_img.at(r, c, ch) = static_cast<float>(v);
            }
            if (!label.data.empty())
                out_lab.at(r, c) = label.at(static_cast<int>(std::floor(y + 0.5)), static_cast<int>(std::floor(x + 0.5)));
        }
    return {std::move(out_img), std::move(out_lab)};
}

/// With probability `p.probability` applies a random elastic deformation;
/// otherwise returns the pair unchanged. Deterministic given `rng`.
template <typename L>
std::pair<Image2D<float>, Image2D<L>> elastic_deform(const Image2D<float>& image, const Image2D<L>& label,
                                                     const ElasticParams& p, Rng& rng, ElasticDraw* draw = nullptr)
{
    if (!label.data.empty() && (label.rows != image.rows || label.cols != image.cols))
        throw DataError("elastic_deform: image and label shapes differ");
    ElasticDraw d;
    d.applied = uniform01(rng) < p.probability;
    if (d.applied) {
        d.smoothing = uniform(rng, p.smoothing_range[0], p.smoothing_range[1]);
        d.magnitude = uniform(rng, p.magnitude_range[0], p.magnitude_range[1]);
    }
    if (draw) *draw = d;
    if (!d.applied) return {image, label};
    const auto field = elastic_field(image.rows, image.cols, d.smoothing, d.magnitude, rng);
    return warp(image, label, field);
}

/// Optional small random rotation and isotropic scaling about the slice
/// centre. Off by default.
struct AffineParams {
    bool enabled = false;
    double max_rotation_deg = 10.0;
    std::array<double, 2> scale_range{0.9, 1.1};
    double probability = 1.0 / 3.0;

    void validate() const
    {
        if (max_rotation_deg < 0.0) throw UsageError("affine rotation must be non-negative");
        if (!(scale_range[0] > 0.0) || scale_range[1] < scale_range[0])
            throw UsageError("affine scale range must be positive and ordered");
        if (probability < 0.0 || probability > 1.0) throw UsageError("affine probability must lie in [0, 1]");
    }
};

/// Applies AffineParams as a displacement field through the same warp as
/// elastic_deform. Draws nothing from `rng` when disabled.
template <typename L>
std::pair<Image2D<float>, Image2D<L>> affine_deform(const Image2D<float>& image, const Image2D<L>& label,
                                                    const AffineParams& p, Rng& rng)
{
    if (!p.enabled) return {image, label};
    if (!(uniform01(rng) < p.probability)) return {image, label};
    const double theta = uniform(rng, -p.max_rotation_deg, p.max_rotation_deg) * 3.14159265358979323846 / 180.0;
    const double scale = uniform(rng, p.scale_range[0], p.scale_range[1]);
    const int rows = image.rows, cols = image.cols;
    const double cy = 0.5 * (rows - 1), cx = 0.5 * (cols - 1);
    const double c = std::cos(theta) / scale, s = std::sin(theta) / scale;
    std::array<std::vector<double>, 2> d{std::vector<double>(static_cast<std::size_t>(rows) * cols),
                                         std::vector<double>(static_cast<std::size_t>(rows) * cols)};
    for (int r = 0; r < rows; ++r)
        for (int q = 0; q < cols; ++q) {
            const double y = r - cy, x = q - cx;
            const std::size_t k = static_cast<std::size_t>(r) * cols + q;
            d[0][k] = (c * y - s * x) - y;
            d[1][k] = (s * y + c * x) - x;
        }
    return warp(image, label, d);
}

} // namespace mpunet

#endif // MPUNET_AUGMENT_HPP
