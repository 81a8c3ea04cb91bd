#ifndef MPUNET_NN_ADAM_HPP
#define MPUNET_NN_ADAM_HPP

#include <cmath>
#include <cstdint>
#include <vector>

#include "mpunet/core/error.hpp"
#include "mpunet/nn/graph.hpp"

namespace mpunet::nn {

struct AdamConfig {
    double lr = 5e-5;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
    double weight_decay = 0.0; // L2 coefficient on convolution kernels

    void validate() const
    {
        if (!(lr > 0.0)) throw UsageError("learning rate must be positive");
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw UsageError("Adam betas must lie in [0, 1)");
        if (!(eps > 0.0)) throw UsageError("Adam epsilon must be positive");
        if (weight_decay < 0.0) throw UsageError("weight decay must be non-negative");
    }
};

template <typename T>
struct OptimState {
    AdamConfig config;
    std::int64_t step = 0;
    std::vector<AlignedVector<T>> m;
    std::vector<AlignedVector<T>> v;
};

/// One bias-corrected Adam update. The L2 term contributes 2*wd*theta to
/// kernel gradients before the moment update.
template <typename T>
void adam_step(OptimState<T>& s, std::vector<Parameter<T>>& params)
{
    if (s.m.empty()) {
        for (const auto& p : params) {
            s.m.emplace_back(p.size(), T(0));
            s.v.emplace_back(p.size(), T(0));
        }
    }
    if (s.m.size() != params.size()) throw UsageError("optimizer state does not match the parameter list");
    ++s.step;
    const auto& c = s.config;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.step));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& p = params[k];
        auto& m = s.m[k];
        auto& v = s.v[k];
        if (m.size() != p.size() || p.grad.size() != p.size()) throw UsageError("moment shape mismatch for " + p.name);
        const bool decay = c.weight_decay != 0.0 && p.role == ParamRole::kernel;
        for (std::size_t i = 0; i < p.size(); ++i) {
            double g = p.grad[i];
            if (decay) g += 2.0 * c.weight_decay * p.value[i];
            const double mi = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            const double vi = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            p.value[i] = static_cast<T>(p.value[i] - c.lr * mhat / (std::sqrt(vhat) + c.eps));
        }
    }
}

} // namespace mpunet::nn

#endif // MPUNET_NN_ADAM_HPP
