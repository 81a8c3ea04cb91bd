#ifndef MPUNET_NN_GRADCHECK_HPP
#define MPUNET_NN_GRADCHECK_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mpunet/core/rng.hpp"
#include "mpunet/nn/graph.hpp"
#include "mpunet/nn/loss.hpp"

namespace mpunet::nn {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst; // "<param>[i]" or "input[i]"
    std::size_t checked = 0;
};

inline double relative_error(double analytic, double numeric)
{
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

namespace detail {

inline void record(GradCheckResult& r, double a, double n, const std::string& where)
{
    ++r.checked;
    const double e = relative_error(a, n);
    if (e > r.max_rel_error) {
        r.max_rel_error = e;
        r.worst = where;
    }
}

/// Up to `limit` evenly spread indices of [0, n); all of them when limit is 0.
inline std::vector<std::size_t> probe_indices(std::size_t n, std::size_t limit)
{
    std::vector<std::size_t> idx;
    if (limit == 0 || n <= limit) {
        for (std::size_t i = 0; i < n; ++i) idx.push_back(i);
        return idx;
    }
    for (std::size_t k = 0; k < limit; ++k) idx.push_back(k * n / limit);
    return idx;
}

} // namespace detail

/// Central-difference check of every parameter (and optionally the input)
/// of a train-mode graph against the scalar loss sum(r * outputs) with a
/// fixed random projection r.
inline GradCheckResult gradcheck_graph(Graph<double>& g, const Tensor4<double>& x, std::uint64_t seed,
                                       std::size_t probes_per_array = 0, bool check_input = true, double h = 1e-5)
{
    Rng rng(seed);
    auto outs = g.forward(x, Mode::train, check_input);
    std::vector<Tensor4<double>> proj;
    for (const auto* o : outs) {
        Tensor4<double> r(o->n, o->h, o->w, o->c);
        for (auto& v : r.data) v = uniform(rng, -1.0, 1.0);
        proj.push_back(std::move(r));
    }
    auto loss_at = [&](const Tensor4<double>& input) {
        auto ys = g.forward(input, Mode::train);
        double s = 0.0;
        for (std::size_t k = 0; k < ys.size(); ++k)
            for (std::size_t i = 0; i < ys[k]->size(); ++i) s += proj[k].data[i] * ys[k]->data[i];
        return s;
    };
    g.zero_grad();
    g.backward(proj);
    GradCheckResult res;
    if (check_input) {
        const auto dx = g.input_grad();
        auto xp = x;
        for (std::size_t i : detail::probe_indices(x.size(), probes_per_array)) {
            xp.data[i] = x.data[i] + h;
            const double up = loss_at(xp);
            xp.data[i] = x.data[i] - h;
            const double down = loss_at(xp);
            xp.data[i] = x.data[i];
            detail::record(res, dx.data[i], (up - down) / (2 * h), "input[" + std::to_string(i) + "]");
        }
    }
    for (auto& p : g.params()) {
        const auto analytic = p.grad;
        for (std::size_t i : detail::probe_indices(p.size(), probes_per_array)) {
            const double orig = p.value[i];
            p.value[i] = orig + h;
            const double up = loss_at(x);
            p.value[i] = orig - h;
            const double down = loss_at(x);
            p.value[i] = orig;
            detail::record(res, analytic[i], (up - down) / (2 * h), p.name + "[" + std::to_string(i) + "]");
        }
    }
    return res;
}

/// Check of the cross-entropy gradient with respect to the logits.
inline GradCheckResult gradcheck_cross_entropy(const Tensor4<double>& logits, const std::vector<std::uint8_t>& labels,
                                               double h = 1e-5)
{
    Tensor4<double> grad;
    softmax_cross_entropy(logits, labels, &grad);
    GradCheckResult res;
    auto z = logits;
    for (std::size_t i = 0; i < z.size(); ++i) {
        z.data[i] = logits.data[i] + h;
        const double up = softmax_cross_entropy(z, labels);
        z.data[i] = logits.data[i] - h;
        const double down = softmax_cross_entropy(z, labels);
        z.data[i] = logits.data[i];
        detail::record(res, grad.data[i], (up - down) / (2 * h), "logits[" + std::to_string(i) + "]");
    }
    return res;
}

} // namespace mpunet::nn

#endif // MPUNET_NN_GRADCHECK_HPP
