#ifndef MPUNET_NN_LOSS_HPP
#define MPUNET_NN_LOSS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mpunet/core/error.hpp"
#include "mpunet/nn/graph.hpp"
#include "mpunet/nn/tensor.hpp"

namespace mpunet::nn {

/// Per-pixel softmax over the channel axis, computed in double.
template <typename T>
Tensor4<T> softmax(const Tensor4<T>& logits)
{
    Tensor4<T> p(logits.n, logits.h, logits.w, logits.c);
    const int c = logits.c;
    std::vector<double> e(c);
    for (std::size_t q = 0; q < logits.pixels(); ++q) {
        const T* z = logits.data.data() + q * c;
        const double mx = *std::max_element(z, z + c);
        double sum = 0.0;
        for (int k = 0; k < c; ++k) sum += e[k] = std::exp(static_cast<double>(z[k]) - mx);
        for (int k = 0; k < c; ++k) p.data[q * c + k] = static_cast<T>(e[k] / sum);
    }
    return p;
}

/// Mean per-pixel categorical cross-entropy. When `grad` is given it
/// receives d(loss)/d(logits) scaled by `grad_scale`.
template <typename T>
double softmax_cross_entropy(const Tensor4<T>& logits, std::span<const std::uint8_t> labels, Tensor4<T>* grad = nullptr,
                             double grad_scale = 1.0)
{
    const int c = logits.c;
    const std::size_t m = logits.pixels();
    if (labels.size() != m)
        throw DataError("label count " + std::to_string(labels.size()) + " does not match " + std::to_string(m) +
                        " pixels");
    if (grad) *grad = Tensor4<T>(logits.n, logits.h, logits.w, c);
    std::vector<double> e(c);
    double total = 0.0;
    const double inv_m = 1.0 / static_cast<double>(m);
    for (std::size_t q = 0; q < m; ++q) {
        const int y = labels[q];
        if (y >= c) throw DataError("label " + std::to_string(y) + " outside [0, " + std::to_string(c - 1) + "]");
        const T* z = logits.data.data() + q * c;
        const double mx = *std::max_element(z, z + c);
        double sum = 0.0;
        for (int k = 0; k < c; ++k) sum += e[k] = std::exp(static_cast<double>(z[k]) - mx);
        total += std::log(sum) - (static_cast<double>(z[y]) - mx);
        if (grad) {
            T* g = grad->data.data() + q * c;
            for (int k = 0; k < c; ++k) g[k] = static_cast<T>(grad_scale * inv_m * (e[k] / sum - (k == y ? 1.0 : 0.0)));
        }
    }
    return total * inv_m;
}

/// Sum of squared convolution-kernel entries.
template <typename T>
double kernel_sq_norm(const std::vector<Parameter<T>>& params)
{
    double s = 0.0;
    for (const auto& p : params)
        if (p.role == ParamRole::kernel)
            for (T v : p.value) s += static_cast<double>(v) * v;
    return s;
}

/// Cross-entropy averaged over all outputs plus l2 times the kernel norm.
/// Fills one logit gradient per output when `grads` is non-null. The l2
/// gradient itself is applied by the optimizer.
template <typename T>
double segmentation_loss(const std::vector<const Tensor4<T>*>& outputs, std::span<const std::uint8_t> labels,
                         const std::vector<Parameter<T>>& params, double l2, std::vector<Tensor4<T>>* grads = nullptr)
{
    if (outputs.empty()) throw UsageError("loss needs at least one output");
    const double w = 1.0 / static_cast<double>(outputs.size());
    double ce = 0.0;
    if (grads) grads->assign(outputs.size(), {});
    for (std::size_t k = 0; k < outputs.size(); ++k)
        ce += w * softmax_cross_entropy(*outputs[k], labels, grads ? &(*grads)[k] : nullptr, w);
    return ce + (l2 != 0.0 ? l2 * kernel_sq_norm(params) : 0.0);
}

} // namespace mpunet::nn

#endif // MPUNET_NN_LOSS_HPP
