#ifndef MPUNET_NN_TENSOR_HPP
#define MPUNET_NN_TENSOR_HPP

#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mpunet/core/error.hpp"

namespace mpunet::nn {

enum class Mode { train, infer };

/// Storage for anything Eigen maps over. A fixed alignment keeps the
/// vectorised reduction order, and hence the results, independent of where
/// the allocator happens to place a block.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

/// Dense NHWC activation block.
template <typename T>
struct Tensor4 {
    int n = 0;
    int h = 0;
    int w = 0;
    int c = 0;
    AlignedVector<T> data;
    bool requires_grad = false;
    AlignedVector<T> grad; // same size as data when tracked

    Tensor4() = default;
    Tensor4(int batch, int height, int width, int channels, T fill = T{})
        : n(batch), h(height), w(width), c(channels),
          data(static_cast<std::size_t>(batch) * height * width * channels, fill)
    {
    }

    std::size_t size() const { return data.size(); }
    std::size_t pixels() const { return static_cast<std::size_t>(n) * h * w; }
    std::size_t image_size() const { return static_cast<std::size_t>(h) * w * c; }

    std::size_t offset(int b, int y, int x, int ch = 0) const
    {
        return ((static_cast<std::size_t>(b) * h + y) * w + x) * c + ch;
    }
    T& at(int b, int y, int x, int ch) { return data[offset(b, y, x, ch)]; }
    const T& at(int b, int y, int x, int ch) const { return data[offset(b, y, x, ch)]; }

    T* image(int b) { return data.data() + static_cast<std::size_t>(b) * image_size(); }
    const T* image(int b) const { return data.data() + static_cast<std::size_t>(b) * image_size(); }

    bool same_shape(const Tensor4& o) const { return n == o.n && h == o.h && w == o.w && c == o.c; }

    std::string shape_string() const
    {
        return "(" + std::to_string(n) + ", " + std::to_string(h) + ", " + std::to_string(w) + ", " +
               std::to_string(c) + ")";
    }

    void release()
    {
        AlignedVector<T>().swap(data);
        AlignedVector<T>().swap(grad);
    }
};

} // namespace mpunet::nn

#endif // MPUNET_NN_TENSOR_HPP
