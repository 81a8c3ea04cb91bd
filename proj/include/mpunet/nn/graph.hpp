#ifndef MPUNET_NN_GRAPH_HPP
#define MPUNET_NN_GRAPH_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mpunet/core/error.hpp"
#include "mpunet/core/rng.hpp"
#include "mpunet/nn/ops.hpp"
#include "mpunet/nn/tensor.hpp"

namespace mpunet::nn {

enum class OpKind { input, conv, tconv, batchnorm, relu, maxpool, upsample_nearest, upsample_bilinear, concat };

inline const char* op_name(OpKind k)
{
    switch (k) {
    case OpKind::input: return "input";
    case OpKind::conv: return "conv";
    case OpKind::tconv: return "tconv";
    case OpKind::batchnorm: return "batchnorm";
    case OpKind::relu: return "relu";
    case OpKind::maxpool: return "maxpool";
    case OpKind::upsample_nearest: return "upsample_nearest";
    case OpKind::upsample_bilinear: return "upsample_bilinear";
    case OpKind::concat: return "concat";
    }
    return "?";
}

/// What a parameter array is for; only kernels are L2-regularised.
enum class ParamRole { kernel, bias, bn_scale, bn_shift };

template <typename T>
struct Parameter {
    std::string name;
    std::string stage;
    ParamRole role = ParamRole::kernel;
    std::vector<int> shape;
    AlignedVector<T> value;
    AlignedVector<T> grad;

    std::size_t size() const { return value.size(); }
};

/// Non-trainable state saved with checkpoints (batch-norm running moments).
template <typename T>
struct Buffer {
    std::string name;
    std::vector<int> shape;
    AlignedVector<T> value;
};

struct NodeDesc {
    OpKind kind = OpKind::input;
    std::vector<int> inputs;
    int channels = 0;
    int level = 0;   // log2 of the downsampling factor relative to the input
    int kernel = 0;  // conv / tconv
    int factor = 1;  // pooling / upsampling
    std::string stage;
    std::string name;
    int param = -1;  // first parameter index
    int buffer = -1; // first buffer index
};

/// Static computation graph built node by node in topological order.
/// Forward caches activations; backward accumulates parameter gradients.
template <typename T>
class Graph {
public:
    explicit Graph(int input_channels)
    {
        NodeDesc in;
        in.kind = OpKind::input;
        in.channels = input_channels;
        in.name = "input";
        nodes_.push_back(in);
    }

    static constexpr int input() { return 0; }

    int conv(int x, int out_channels, int kernel, const std::string& stage, const std::string& name, bool bias = true)
    {
        if (kernel < 1 || kernel % 2 == 0) throw UsageError("conv kernel must be odd");
        NodeDesc n = unary(OpKind::conv, x, stage, name);
        n.channels = out_channels;
        n.kernel = kernel;
        n.param = static_cast<int>(params_.size());
        add_param(name + ".kernel", stage, ParamRole::kernel, {kernel, kernel, node(x).channels, out_channels});
        if (bias) add_param(name + ".bias", stage, ParamRole::bias, {out_channels});
        return push(n);
    }

    /// Stride-2 transposed convolution doubling the spatial size.
    int tconv2x(int x, int out_channels, int kernel, const std::string& stage, const std::string& name,
                bool bias = true)
    {
        if (kernel < 1) throw UsageError("tconv kernel must be positive");
        if (node(x).level < 1) throw UsageError("tconv would exceed the input resolution");
        NodeDesc n = unary(OpKind::tconv, x, stage, name);
        n.channels = out_channels;
        n.kernel = kernel;
        n.level = node(x).level - 1;
        n.param = static_cast<int>(params_.size());
        add_param(name + ".kernel", stage, ParamRole::kernel, {node(x).channels, kernel, kernel, out_channels});
        if (bias) add_param(name + ".bias", stage, ParamRole::bias, {out_channels});
        return push(n);
    }

    int batchnorm(int x, const std::string& stage, const std::string& name)
    {
        NodeDesc n = unary(OpKind::batchnorm, x, stage, name);
        const int c = n.channels;
        n.param = static_cast<int>(params_.size());
        add_param(name + ".gamma", stage, ParamRole::bn_scale, {c}, T(1));
        add_param(name + ".beta", stage, ParamRole::bn_shift, {c});
        n.buffer = static_cast<int>(buffers_.size());
        buffers_.push_back({name + ".running_mean", {c}, AlignedVector<T>(c, T(0))});
        buffers_.push_back({name + ".running_var", {c}, AlignedVector<T>(c, T(1))});
        return push(n);
    }

    int relu(int x) { return push(unary(OpKind::relu, x, node(x).stage, "")); }

    int maxpool(int x, int factor)
    {
        if (factor < 1 || (factor & (factor - 1))) throw UsageError("pool factor must be a power of two");
        NodeDesc n = unary(OpKind::maxpool, x, node(x).stage, "");
        n.factor = factor;
        n.level += log2i(factor);
        return push(n);
    }

    int upsample(int x, int factor, bool bilinear)
    {
        if (factor < 1 || (factor & (factor - 1))) throw UsageError("upsample factor must be a power of two");
        if (node(x).level < log2i(factor)) throw UsageError("upsample would exceed the input resolution");
        NodeDesc n = unary(bilinear ? OpKind::upsample_bilinear : OpKind::upsample_nearest, x, node(x).stage, "");
        n.factor = factor;
        n.level -= log2i(factor);
        return push(n);
    }

    int concat(const std::vector<int>& xs)
    {
        if (xs.empty()) throw UsageError("concat needs inputs");
        NodeDesc n;
        n.kind = OpKind::concat;
        n.inputs = xs;
        n.level = node(xs[0]).level;
        for (int x : xs) {
            if (node(x).level != n.level) throw UsageError("concat inputs must share a resolution");
            n.channels += node(x).channels;
        }
        return push(n);
    }

    void set_outputs(std::vector<int> outs)
    {
        for (int o : outs)
            if (node(o).level != 0) throw UsageError("graph outputs must be at input resolution");
        outputs_ = std::move(outs);
    }

    const std::vector<int>& outputs() const { return outputs_; }
    const std::vector<NodeDesc>& nodes() const { return nodes_; }
    const NodeDesc& node(int i) const
    {
        if (i < 0 || i >= static_cast<int>(nodes_.size())) throw UsageError("node reference out of range");
        return nodes_[i];
    }
    int input_channels() const { return nodes_[0].channels; }
    int output_channels() const { return node(outputs_.at(0)).channels; }

    /// Input height and width must be divisible by 2^depth().
    int depth() const
    {
        int d = 0;
        for (const auto& n : nodes_) d = std::max(d, n.level);
        return d;
    }

    std::vector<Parameter<T>>& params() { return params_; }
    const std::vector<Parameter<T>>& params() const { return params_; }
    std::vector<Buffer<T>>& buffers() { return buffers_; }
    const std::vector<Buffer<T>>& buffers() const { return buffers_; }

    std::size_t parameter_count() const
    {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.size();
        return n;
    }

    /// He-normal kernels, zero biases, unit/zero batch-norm affine terms.
    void initialize(std::uint64_t seed)
    {
        Rng rng(seed);
        for (const auto& n : nodes_) {
            if (n.kind != OpKind::conv && n.kind != OpKind::tconv) continue;
            auto& kernel = params_[n.param];
            const int cin = node(n.inputs[0]).channels;
            const double stddev = std::sqrt(2.0 / (static_cast<double>(n.kernel) * n.kernel * cin));
            for (auto& w : kernel.value) w = static_cast<T>(stddev * normal(rng));
        }
        for (auto& p : params_) {
            if (p.role == ParamRole::bias || p.role == ParamRole::bn_shift) std::fill(p.value.begin(), p.value.end(), T(0));
            if (p.role == ParamRole::bn_scale) std::fill(p.value.begin(), p.value.end(), T(1));
        }
        for (auto& b : buffers_)
            std::fill(b.value.begin(), b.value.end(), b.name.ends_with("running_var") ? T(1) : T(0));
    }

    void zero_grad()
    {
        for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), T(0));
    }

    /// Runs the graph; returns the output activations (logits).
    std::vector<const Tensor4<T>*> forward(const Tensor4<T>& x, Mode mode, bool track_input_grad = false)
    {
        if (outputs_.empty()) throw UsageError("graph has no outputs");
        if (x.c != input_channels())
            throw DataError("input has " + std::to_string(x.c) + " channels, graph expects " +
                            std::to_string(input_channels()));
        const int div = 1 << depth();
        if (x.h % div != 0 || x.w % div != 0 || x.h == 0 || x.w == 0)
            throw DataError("input size " + std::to_string(x.h) + "x" + std::to_string(x.w) +
                            " is incompatible with pooling depth (needs multiples of " + std::to_string(div) + ")");
        mode_ = mode;
        track_input_grad_ = track_input_grad;
        const std::size_t count = nodes_.size();
        values_.assign(count, {});
        bn_cache_.assign(count, {});
        pool_index_.assign(count, {});
        grads_.clear();
        values_[0] = x;
        const auto last = last_use();
        for (std::size_t i = 1; i < count; ++i) {
            run_forward(static_cast<int>(i));
            if (mode == Mode::infer)
                for (int in : nodes_[i].inputs)
                    if (last[in] == static_cast<int>(i) && !is_output(in)) values_[in].release();
        }
        forward_done_ = true;
        std::vector<const Tensor4<T>*> out;
        for (int o : outputs_) out.push_back(&values_[o]);
        return out;
    }

    /// Back-propagates gradients of the loss w.r.t. each output.
    void backward(const std::vector<Tensor4<T>>& output_grads)
    {
        if (!forward_done_ || mode_ != Mode::train) throw UsageError("backward requires a preceding train-mode forward");
        if (output_grads.size() != outputs_.size()) throw UsageError("one gradient per graph output is required");
        const std::size_t count = nodes_.size();
        grads_.assign(count, {});
        for (std::size_t k = 0; k < outputs_.size(); ++k) {
            if (!output_grads[k].same_shape(values_[outputs_[k]])) throw DataError("output gradient shape mismatch");
            auto& g = grad_of(outputs_[k]);
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += output_grads[k].data[i];
        }
        for (int i = static_cast<int>(count) - 1; i >= 1; --i) {
            if (grads_[i].data.empty()) continue; // does not influence the loss
            run_backward(i);
            grads_[i].release();
            if (mode_ == Mode::train && i != 0) bn_cache_[i] = {};
        }
        forward_done_ = false;
    }

    /// Gradient w.r.t. the graph input after backward (forward must have
    /// been called with track_input_grad).
    const Tensor4<T>& input_grad() const { return grads_.at(0); }

    /// Rough peak bytes needed per sample for a train step at h x w.
    std::size_t activation_bytes_per_sample(int h, int w) const
    {
        std::size_t elems = 0, scratch = 0;
        for (const auto& n : nodes_) {
            const std::size_t px = static_cast<std::size_t>(h >> n.level) * static_cast<std::size_t>(w >> n.level);
            std::size_t mult = 2; // value + gradient
            if (n.kind == OpKind::batchnorm) mult = 3;
            elems += px * n.channels * mult;
            if (n.kind == OpKind::conv)
                scratch = std::max(scratch, px * n.kernel * n.kernel * node(n.inputs[0]).channels);
        }
        return (elems * sizeof(T)) + 2 * scratch * sizeof(T) / 16;
    }

private:
    static int log2i(int f)
    {
        int l = 0;
        while ((1 << l) < f) ++l;
        return l;
    }

    NodeDesc unary(OpKind k, int x, const std::string& stage, const std::string& name) const
    {
        const NodeDesc& in = node(x);
        NodeDesc n;
        n.kind = k;
        n.inputs = {x};
        n.channels = in.channels;
        n.level = in.level;
        n.stage = stage;
        n.name = name;
        return n;
    }

    int push(const NodeDesc& n)
    {
        nodes_.push_back(n);
        return static_cast<int>(nodes_.size()) - 1;
    }

    void add_param(const std::string& name, const std::string& stage, ParamRole role, std::vector<int> shape,
                   T fill = T(0))
    {
        for (const auto& p : params_)
            if (p.name == name) throw UsageError("duplicate parameter name '" + name + "'");
        std::size_t size = 1;
        for (int s : shape) size *= static_cast<std::size_t>(s);
        params_.push_back({name, stage, role, std::move(shape), AlignedVector<T>(size, fill), AlignedVector<T>(size, T(0))});
    }

    bool is_output(int i) const { return std::find(outputs_.begin(), outputs_.end(), i) != outputs_.end(); }

    std::vector<int> last_use() const
    {
        std::vector<int> last(nodes_.size(), -1);
        for (std::size_t i = 0; i < nodes_.size(); ++i)
            for (int in : nodes_[i].inputs) last[in] = static_cast<int>(i);
        return last;
    }

    std::span<const T> pvalue(int idx) const
    {
        if (idx < 0 || idx >= static_cast<int>(params_.size())) return {};
        return params_[idx].value;
    }

    bool has_bias(const NodeDesc& n) const
    {
        const int b = n.param + 1;
        return b < static_cast<int>(params_.size()) && params_[b].role == ParamRole::bias &&
               params_[b].name == n.name + ".bias";
    }

    Tensor4<T>& grad_of(int i)
    {
        auto& g = grads_[i];
        if (g.data.empty()) {
            const auto& v = values_[i];
            g = Tensor4<T>(v.n, v.h, v.w, v.c);
        }
        return g;
    }

    void run_forward(int i)
    {
        const NodeDesc& n = nodes_[i];
        const Tensor4<T>& x = values_[n.inputs[0]];
        Tensor4<T>& y = values_[i];
        switch (n.kind) {
        case OpKind::conv:
            y = Tensor4<T>(x.n, x.h, x.w, n.channels);
            ops::conv_forward<T>(x, pvalue(n.param), has_bias(n) ? pvalue(n.param + 1) : std::span<const T>{},
                                 n.kernel, y, scratch_);
            break;
        case OpKind::tconv:
            y = Tensor4<T>(x.n, 2 * x.h, 2 * x.w, n.channels);
            ops::tconv_forward<T>(x, pvalue(n.param), has_bias(n) ? pvalue(n.param + 1) : std::span<const T>{},
                                  n.kernel, y, scratch_);
            break;
        case OpKind::batchnorm:
            y = Tensor4<T>(x.n, x.h, x.w, x.c);
            if (mode_ == Mode::train)
                ops::bn_forward_train<T>(x, pvalue(n.param), pvalue(n.param + 1), buffers_[n.buffer].value,
                                         buffers_[n.buffer + 1].value, y, bn_cache_[i]);
            else
                ops::bn_forward_infer<T>(x, pvalue(n.param), pvalue(n.param + 1), buffers_[n.buffer].value,
                                         buffers_[n.buffer + 1].value, y);
            break;
        case OpKind::relu:
            y = Tensor4<T>(x.n, x.h, x.w, x.c);
            ops::relu_forward(x, y);
            break;
        case OpKind::maxpool:
            y = Tensor4<T>(x.n, x.h / n.factor, x.w / n.factor, x.c);
            ops::maxpool_forward(x, n.factor, y, pool_index_[i]);
            break;
        case OpKind::upsample_nearest:
            y = Tensor4<T>(x.n, x.h * n.factor, x.w * n.factor, x.c);
            ops::upsample_nearest_forward(x, n.factor, y);
            break;
        case OpKind::upsample_bilinear:
            y = Tensor4<T>(x.n, x.h * n.factor, x.w * n.factor, x.c);
            ops::upsample_bilinear_forward(x, n.factor, y);
            break;
        case OpKind::concat: {
            y = Tensor4<T>(x.n, x.h, x.w, n.channels);
            std::vector<const Tensor4<T>*> xs;
            for (int in : n.inputs) xs.push_back(&values_[in]);
            ops::concat_forward(xs, y);
            break;
        }
        case OpKind::input: break;
        }
    }

    bool wants_grad(int input) const { return input != 0 || track_input_grad_; }

    void run_backward(int i)
    {
        const NodeDesc& n = nodes_[i];
        const Tensor4<T>& dy = grads_[i];
        const int in0 = n.inputs[0];
        const Tensor4<T>& x = values_[in0];
        Tensor4<T>* dx = wants_grad(in0) ? &grad_of(in0) : nullptr;
        auto pgrad = [&](int idx) -> std::span<T> { return params_[idx].grad; };
        switch (n.kind) {
        case OpKind::conv:
            ops::conv_backward<T>(x, pvalue(n.param), dy, n.kernel, dx, pgrad(n.param),
                                  has_bias(n) ? pgrad(n.param + 1) : std::span<T>{}, scratch_);
            break;
        case OpKind::tconv:
            ops::tconv_backward<T>(x, pvalue(n.param), dy, n.kernel, dx, pgrad(n.param),
                                   has_bias(n) ? pgrad(n.param + 1) : std::span<T>{}, scratch_);
            break;
        case OpKind::batchnorm:
            ops::bn_backward<T>(dy, bn_cache_[i], pvalue(n.param), dx, pgrad(n.param), pgrad(n.param + 1));
            break;
        case OpKind::relu:
            if (dx) ops::relu_backward(values_[i], dy, *dx);
            break;
        case OpKind::maxpool:
            if (dx) ops::maxpool_backward(dy, pool_index_[i], *dx);
            break;
        case OpKind::upsample_nearest:
            if (dx) ops::upsample_nearest_backward(dy, n.factor, *dx);
            break;
        case OpKind::upsample_bilinear:
            if (dx) ops::upsample_bilinear_backward(dy, n.factor, *dx);
            break;
        case OpKind::concat: {
            int off = 0;
            for (int in : n.inputs) {
                if (wants_grad(in)) ops::concat_backward(dy, off, grad_of(in));
                off += nodes_[in].channels;
            }
            break;
        }
        case OpKind::input: break;
        }
    }

    std::vector<NodeDesc> nodes_;
    std::vector<int> outputs_;
    std::vector<Parameter<T>> params_;
    std::vector<Buffer<T>> buffers_;

    Mode mode_ = Mode::infer;
    bool forward_done_ = false;
    bool track_input_grad_ = false;
    std::vector<Tensor4<T>> values_;
    std::vector<Tensor4<T>> grads_;
    std::vector<ops::BatchNormCache<T>> bn_cache_;
    std::vector<std::vector<std::uint32_t>> pool_index_;
    AlignedVector<T> scratch_;
};

} // namespace mpunet::nn

#endif // MPUNET_NN_GRAPH_HPP
