#ifndef MPUNET_NN_OPS_HPP
#define MPUNET_NN_OPS_HPP

// Forward and backward kernels for every layer kind. Backward functions
// accumulate (+=) into their gradient outputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "mpunet/nn/tensor.hpp"

namespace mpunet::nn::ops {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// --- convolution (k x k, stride 1, zero "same" padding) ---------------------
// kernel layout [ky][kx][cin][cout]

template <typename T>
void im2col(const T* img, int h, int w, int cin, int k, T* col)
{
    const int p = (k - 1) / 2;
    const std::size_t row_len = static_cast<std::size_t>(k) * k * cin;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            T* dst = col + (static_cast<std::size_t>(y) * w + x) * row_len;
            for (int ky = 0; ky < k; ++ky) {
                const int sy = y + ky - p;
                for (int kx = 0; kx < k; ++kx, dst += cin) {
                    const int sx = x + kx - p;
                    if (sy < 0 || sy >= h || sx < 0 || sx >= w) std::fill(dst, dst + cin, T{});
                    else std::copy_n(img + (static_cast<std::size_t>(sy) * w + sx) * cin, cin, dst);
                }
            }
        }
}

template <typename T>
void col2im_add(const T* col, int h, int w, int cin, int k, T* img)
{
    const int p = (k - 1) / 2;
    const std::size_t row_len = static_cast<std::size_t>(k) * k * cin;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const T* src = col + (static_cast<std::size_t>(y) * w + x) * row_len;
            for (int ky = 0; ky < k; ++ky) {
                const int sy = y + ky - p;
                for (int kx = 0; kx < k; ++kx, src += cin) {
                    const int sx = x + kx - p;
                    if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                    T* dst = img + (static_cast<std::size_t>(sy) * w + sx) * cin;
                    for (int c = 0; c < cin; ++c) dst[c] += src[c];
                }
            }
        }
}

template <typename T>
void conv_forward(const Tensor4<T>& x, std::span<const T> kernel, std::span<const T> bias, int k, Tensor4<T>& y,
                  AlignedVector<T>& scratch)
{
    const int cout = y.c;
    const std::size_t hw = static_cast<std::size_t>(x.h) * x.w;
    const std::size_t kk = static_cast<std::size_t>(k) * k * x.c;
    ConstMatMap<T> wm(kernel.data(), static_cast<Eigen::Index>(kk), cout);
    if (k > 1) scratch.resize(hw * kk);
    for (int b = 0; b < x.n; ++b) {
        const T* col = x.image(b);
        if (k > 1) {
            im2col(x.image(b), x.h, x.w, x.c, k, scratch.data());
            col = scratch.data();
        }
        ConstMatMap<T> cm(col, static_cast<Eigen::Index>(hw), static_cast<Eigen::Index>(kk));
        MatMap<T> ym(y.image(b), static_cast<Eigen::Index>(hw), cout);
        ym.noalias() = cm * wm;
        if (!bias.empty()) {
            Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias.data(), cout);
            ym.rowwise() += bv;
        }
    }
}

template <typename T>
void conv_backward(const Tensor4<T>& x, std::span<const T> kernel, const Tensor4<T>& dy, int k, Tensor4<T>* dx,
                   std::span<T> dkernel, std::span<T> dbias, AlignedVector<T>& scratch)
{
    const int cout = dy.c;
    const std::size_t hw = static_cast<std::size_t>(x.h) * x.w;
    const std::size_t kk = static_cast<std::size_t>(k) * k * x.c;
    ConstMatMap<T> wm(kernel.data(), static_cast<Eigen::Index>(kk), cout);
    MatMap<T> dwm(dkernel.data(), static_cast<Eigen::Index>(kk), cout);
    AlignedVector<T> dcol;
    if (k > 1) scratch.resize(hw * kk);
    for (int b = 0; b < x.n; ++b) {
        ConstMatMap<T> dym(dy.image(b), static_cast<Eigen::Index>(hw), cout);
        const T* col = x.image(b);
        if (k > 1) {
            im2col(x.image(b), x.h, x.w, x.c, k, scratch.data());
            col = scratch.data();
        }
        ConstMatMap<T> cm(col, static_cast<Eigen::Index>(hw), static_cast<Eigen::Index>(kk));
        dwm.noalias() += cm.transpose() * dym;
        if (!dbias.empty()) {
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> dbv(dbias.data(), cout);
            dbv += dym.colwise().sum();
        }
        if (dx) {
            if (k == 1) {
                MatMap<T> dxm(dx->image(b), static_cast<Eigen::Index>(hw), x.c);
                dxm.noalias() += dym * wm.transpose();
            }
            else {
                dcol.resize(hw * kk);
                MatMap<T> dcm(dcol.data(), static_cast<Eigen::Index>(hw), static_cast<Eigen::Index>(kk));
                dcm.noalias() = dym * wm.transpose();
                col2im_add(dcol.data(), x.h, x.w, x.c, k, dx->image(b));
            }
        }
    }
}

// --- transposed convolution, stride 2 ----------------------------------------
// Input pixel (y, x) and tap (ky, kx) write output (2y + ky - p, 2x + kx - p),
// p = (k - 1) / 2; the output is exactly twice the input size.
// kernel layout [cin][ky][kx][cout]

template <typename T>
void tconv_forward(const Tensor4<T>& x, std::span<const T> kernel, std::span<const T> bias, int k, Tensor4<T>& y,
                   AlignedVector<T>& scratch)
{
    const int cout = y.c;
    const int p = (k - 1) / 2;
    const std::size_t hw = static_cast<std::size_t>(x.h) * x.w;
    const std::size_t kc = static_cast<std::size_t>(k) * k * cout;
    ConstMatMap<T> wm(kernel.data(), x.c, static_cast<Eigen::Index>(kc));
    scratch.resize(hw * kc);
    MatMap<T> zm(scratch.data(), static_cast<Eigen::Index>(hw), static_cast<Eigen::Index>(kc));
    for (int b = 0; b < x.n; ++b) {
        ConstMatMap<T> xm(x.image(b), static_cast<Eigen::Index>(hw), x.c);
        zm.noalias() = xm * wm;
        T* out = y.image(b);
        for (std::size_t q = 0; q < static_cast<std::size_t>(y.h) * y.w; ++q)
            for (int c = 0; c < cout; ++c) out[q * cout + c] = bias.empty() ? T{} : bias[c];
        for (int iy = 0; iy < x.h; ++iy)
            for (int ix = 0; ix < x.w; ++ix) {
                const T* z = scratch.data() + (static_cast<std::size_t>(iy) * x.w + ix) * kc;
                for (int ky = 0; ky < k; ++ky) {
                    const int oy = 2 * iy + ky - p;
                    for (int kx = 0; kx < k; ++kx, z += cout) {
                        const int ox = 2 * ix + kx - p;
                        if (oy < 0 || oy >= y.h || ox < 0 || ox >= y.w) continue;
                        T* dst = out + (static_cast<std::size_t>(oy) * y.w + ox) * cout;
                        for (int c = 0; c < cout; ++c) dst[c] += z[c];
                    }
                }
            }
    }
}

template <typename T>
void tconv_backward(const Tensor4<T>& x, std::span<const T> kernel, const Tensor4<T>& dy, int k, Tensor4<T>* dx,
                    std::span<T> dkernel, std::span<T> dbias, AlignedVector<T>& scratch)
{
    const int cout = dy.c;
    const int p = (k - 1) / 2;
    const std::size_t hw = static_cast<std::size_t>(x.h) * x.w;
    const std::size_t kc = static_cast<std::size_t>(k) * k * cout;
    ConstMatMap<T> wm(kernel.data(), x.c, static_cast<Eigen::Index>(kc));
    MatMap<T> dwm(dkernel.data(), x.c, static_cast<Eigen::Index>(kc));
    scratch.resize(hw * kc);
    MatMap<T> dzm(scratch.data(), static_cast<Eigen::Index>(hw), static_cast<Eigen::Index>(kc));
    for (int b = 0; b < x.n; ++b) {
        const T* g = dy.image(b);
        for (int iy = 0; iy < x.h; ++iy)
            for (int ix = 0; ix < x.w; ++ix) {
                T* z = scratch.data() + (static_cast<std::size_t>(iy) * x.w + ix) * kc;
                for (int ky = 0; ky < k; ++ky) {
                    const int oy = 2 * iy + ky - p;
                    for (int kx = 0; kx < k; ++kx, z += cout) {
                        const int ox = 2 * ix + kx - p;
                        if (oy < 0 || oy >= dy.h || ox < 0 || ox >= dy.w) std::fill(z, z + cout, T{});
                        else std::copy_n(g + (static_cast<std::size_t>(oy) * dy.w + ox) * cout, cout, z);
                    }
                }
            }
        ConstMatMap<T> xm(x.image(b), static_cast<Eigen::Index>(hw), x.c);
        dwm.noalias() += xm.transpose() * dzm;
        if (dx) {
            MatMap<T> dxm(dx->image(b), static_cast<Eigen::Index>(hw), x.c);
            dxm.noalias() += dzm * wm.transpose();
        }
        if (!dbias.empty()) {
            ConstMatMap<T> gm(g, static_cast<Eigen::Index>(dy.h) * dy.w, cout);
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> dbv(dbias.data(), cout);
            dbv += gm.colwise().sum();
        }
    }
}

// --- batch normalisation -----------------------------------------------------

inline constexpr double bn_eps = 1e-5;
inline constexpr double bn_momentum = 0.1;

template <typename T>
struct BatchNormCache {
    AlignedVector<T> xhat;
    std::vector<double> inv_std;
};

template <typename T>
void bn_forward_train(const Tensor4<T>& x, std::span<const T> gamma, std::span<const T> beta,
                      std::span<T> running_mean, std::span<T> running_var, Tensor4<T>& y, BatchNormCache<T>& cache)
{
    const int c = x.c;
    const std::size_t m = x.pixels();
    std::vector<double> mean(c, 0.0), var(c, 0.0);
    for (std::size_t q = 0; q < m; ++q)
        for (int ch = 0; ch < c; ++ch) mean[ch] += x.data[q * c + ch];
    for (auto& v : mean) v /= static_cast<double>(m);
    for (std::size_t q = 0; q < m; ++q)
        for (int ch = 0; ch < c; ++ch) {
            const double d = x.data[q * c + ch] - mean[ch];
            var[ch] += d * d;
        }
    for (auto& v : var) v /= static_cast<double>(m);
    cache.inv_std.resize(c);
    for (int ch = 0; ch < c; ++ch) cache.inv_std[ch] = 1.0 / std::sqrt(var[ch] + bn_eps);
    cache.xhat.resize(x.size());
    for (std::size_t q = 0; q < m; ++q)
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t i = q * c + ch;
            const T xh = static_cast<T>((x.data[i] - mean[ch]) * cache.inv_std[ch]);
            cache.xhat[i] = xh;
            y.data[i] = gamma[ch] * xh + beta[ch];
        }
    const double unbias = m > 1 ? static_cast<double>(m) / static_cast<double>(m - 1) : 1.0;
    for (int ch = 0; ch < c; ++ch) {
        running_mean[ch] = static_cast<T>((1.0 - bn_momentum) * running_mean[ch] + bn_momentum * mean[ch]);
        running_var[ch] = static_cast<T>((1.0 - bn_momentum) * running_var[ch] + bn_momentum * var[ch] * unbias);
    }
}

template <typename T>
void bn_forward_infer(const Tensor4<T>& x, std::span<const T> gamma, std::span<const T> beta,
                      std::span<const T> running_mean, std::span<const T> running_var, Tensor4<T>& y)
{
    const int c = x.c;
    AlignedVector<T> scale(c), shift(c);
    for (int ch = 0; ch < c; ++ch) {
        const double inv = 1.0 / std::sqrt(static_cast<double>(running_var[ch]) + bn_eps);
        scale[ch] = static_cast<T>(gamma[ch] * inv);
        shift[ch] = static_cast<T>(beta[ch] - gamma[ch] * running_mean[ch] * inv);
    }
    const std::size_t m = x.pixels();
    for (std::size_t q = 0; q < m; ++q)
        for (int ch = 0; ch < c; ++ch) y.data[q * c + ch] = x.data[q * c + ch] * scale[ch] + shift[ch];
}

template <typename T>
void bn_backward(const Tensor4<T>& dy, const BatchNormCache<T>& cache, std::span<const T> gamma, Tensor4<T>* dx,
                 std::span<T> dgamma, std::span<T> dbeta)
{
    const int c = dy.c;
    const std::size_t m = dy.pixels();
    std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
    for (std::size_t q = 0; q < m; ++q)
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t i = q * c + ch;
            sum_dy[ch] += dy.data[i];
            sum_dy_xhat[ch] += static_cast<double>(dy.data[i]) * cache.xhat[i];
        }
    for (int ch = 0; ch < c; ++ch) {
        dgamma[ch] += static_cast<T>(sum_dy_xhat[ch]);
        dbeta[ch] += static_cast<T>(sum_dy[ch]);
    }
    if (!dx) return;
    const double inv_m = 1.0 / static_cast<double>(m);
    for (std::size_t q = 0; q < m; ++q)
        for (int ch = 0; ch < c; ++ch) {
            const std::size_t i = q * c + ch;
            const double g = gamma[ch] * cache.inv_std[ch] * inv_m;
            dx->data[i] += static_cast<T>(
                g * (static_cast<double>(m) * dy.data[i] - sum_dy[ch] - cache.xhat[i] * sum_dy_xhat[ch]));
        }
}

// --- elementwise / resampling -----------------------------------------------

template <typename T>
void relu_forward(const Tensor4<T>& x, Tensor4<T>& y)
{
    for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = x.data[i] > T{} ? x.data[i] : T{};
}

/// Uses the forward output: y > 0 exactly where x > 0.
template <typename T>
void relu_backward(const Tensor4<T>& y, const Tensor4<T>& dy, Tensor4<T>& dx)
{
    for (std::size_t i = 0; i < y.size(); ++i)
        if (y.data[i] > T{}) dx.data[i] += dy.data[i];
}

/// Max over non-overlapping f x f windows; `argmax` stores the flat source index.
template <typename T>
void maxpool_forward(const Tensor4<T>& x, int f, Tensor4<T>& y, std::vector<std::uint32_t>& argmax)
{
    argmax.resize(y.size());
    for (int b = 0; b < y.n; ++b)
        for (int oy = 0; oy < y.h; ++oy)
            for (int ox = 0; ox < y.w; ++ox)
                for (int c = 0; c < y.c; ++c) {
                    std::size_t best = x.offset(b, oy * f, ox * f, c);
                    for (int dy = 0; dy < f; ++dy)
                        for (int dx = 0; dx < f; ++dx) {
                            const std::size_t i = x.offset(b, oy * f + dy, ox * f + dx, c);
                            if (x.data[i] > x.data[best]) best = i;
                        }
                    const std::size_t o = y.offset(b, oy, ox, c);
                    y.data[o] = x.data[best];
                    argmax[o] = static_cast<std::uint32_t>(best);
                }
}

template <typename T>
void maxpool_backward(const Tensor4<T>& dy, const std::vector<std::uint32_t>& argmax, Tensor4<T>& dx)
{
    for (std::size_t o = 0; o < dy.size(); ++o) dx.data[argmax[o]] += dy.data[o];
}

template <typename T>
void upsample_nearest_forward(const Tensor4<T>& x, int f, Tensor4<T>& y)
{
    for (int b = 0; b < y.n; ++b)
        for (int oy = 0; oy < y.h; ++oy)
            for (int ox = 0; ox < y.w; ++ox)
                std::copy_n(&x.at(b, oy / f, ox / f, 0), x.c, &y.at(b, oy, ox, 0));
}

template <typename T>
void upsample_nearest_backward(const Tensor4<T>& dy, int f, Tensor4<T>& dx)
{
    for (int b = 0; b < dy.n; ++b)
        for (int oy = 0; oy < dy.h; ++oy)
            for (int ox = 0; ox < dy.w; ++ox) {
                const T* g = &dy.at(b, oy, ox, 0);
                T* d = &dx.at(b, oy / f, ox / f, 0);
                for (int c = 0; c < dy.c; ++c) d[c] += g[c];
            }
}

/// Half-pixel-centre bilinear taps for upsampling n -> n*f along one axis.
struct BilinearTap {
    int i0;
    int i1;
    double w1;
};

inline std::vector<BilinearTap> bilinear_taps(int n, int f)
{
    std::vector<BilinearTap> taps(static_cast<std::size_t>(n) * f);
    for (int o = 0; o < n * f; ++o) {
        const double src = std::clamp((o + 0.5) / f - 0.5, 0.0, static_cast<double>(n - 1));
        const int i0 = std::min(static_cast<int>(std::floor(src)), n - 1);
        const int i1 = std::min(i0 + 1, n - 1);
        taps[o] = {i0, i1, src - i0};
    }
    return taps;
}

template <typename T>
void upsample_bilinear_forward(const Tensor4<T>& x, int f, Tensor4<T>& y)
{
    const auto ty = bilinear_taps(x.h, f);
    const auto tx = bilinear_taps(x.w, f);
    for (int b = 0; b < y.n; ++b)
        for (int oy = 0; oy < y.h; ++oy)
            for (int ox = 0; ox < y.w; ++ox) {
                const auto& a = ty[oy];
                const auto& e = tx[ox];
                const T w00 = static_cast<T>((1 - a.w1) * (1 - e.w1)), w01 = static_cast<T>((1 - a.w1) * e.w1);
                const T w10 = static_cast<T>(a.w1 * (1 - e.w1)), w11 = static_cast<T>(a.w1 * e.w1);
                const T* p00 = &x.at(b, a.i0, e.i0, 0);
                const T* p01 = &x.at(b, a.i0, e.i1, 0);
                const T* p10 = &x.at(b, a.i1, e.i0, 0);
                const T* p11 = &x.at(b, a.i1, e.i1, 0);
                T* out = &y.at(b, oy, ox, 0);
                for (int c = 0; c < x.c; ++c) out[c] = w00 * p00[c] + w01 * p01[c] + w10 * p10[c] + w11 * p11[c];
            }
}

template <typename T>
void upsample_bilinear_backward(const Tensor4<T>& dy, int f, Tensor4<T>& dx)
{
    const auto ty = bilinear_taps(dx.h, f);
    const auto tx = bilinear_taps(dx.w, f);
    for (int b = 0; b < dy.n; ++b)
        for (int oy = 0; oy < dy.h; ++oy)
            for (int ox = 0; ox < dy.w; ++ox) {
                const auto& a = ty[oy];
                const auto& e = tx[ox];
                const T w00 = static_cast<T>((1 - a.w1) * (1 - e.w1)), w01 = static_cast<T>((1 - a.w1) * e.w1);
                const T w10 = static_cast<T>(a.w1 * (1 - e.w1)), w11 = static_cast<T>(a.w1 * e.w1);
                const T* g = &dy.at(b, oy, ox, 0);
                T* d00 = &dx.at(b, a.i0, e.i0, 0);
                T* d01 = &dx.at(b, a.i0, e.i1, 0);
                T* d10 = &dx.at(b, a.i1, e.i0, 0);
                T* d11 = &dx.at(b, a.i1, e.i1, 0);
                for (int c = 0; c < dy.c; ++c) {
                    d00[c] += w00 * g[c];
                    d01[c] += w01 * g[c];
                    d10[c] += w10 * g[c];
                    d11[c] += w11 * g[c];
                }
            }
}

template <typename T>
void concat_forward(const std::vector<const Tensor4<T>*>& xs, Tensor4<T>& y)
{
    const std::size_t m = y.pixels();
    int off = 0;
    for (const auto* x : xs) {
        for (std::size_t q = 0; q < m; ++q)
            std::copy_n(x->data.data() + q * x->c, x->c, y.data.data() + q * y.c + off);
        off += x->c;
    }
}

template <typename T>
void concat_backward(const Tensor4<T>& dy, int channel_offset, Tensor4<T>& dx)
{
    const std::size_t m = dy.pixels();
    for (std::size_t q = 0; q < m; ++q) {
        const T* g = dy.data.data() + q * dy.c + channel_offset;
        T* d = dx.data.data() + q * dx.c;
        for (int c = 0; c < dx.c; ++c) d[c] += g[c];
    }
}

} // namespace mpunet::nn::ops

#endif // MPUNET_NN_OPS_HPP
