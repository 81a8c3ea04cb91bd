#ifndef MPUNET_UNETZOO_HPP
#define MPUNET_UNETZOO_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mpunet/core/error.hpp"
#include "mpunet/nn/graph.hpp"

namespace mpunet {

enum class Variant { unet, unet2p, unet3p };

inline std::string to_string(Variant v)
{
    switch (v) {
    case Variant::unet: return "unet";
    case Variant::unet2p: return "unet2p";
    case Variant::unet3p: return "unet3p";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s)
{
    if (s == "unet") return Variant::unet;
    if (s == "unet2p") return Variant::unet2p;
    if (s == "unet3p") return Variant::unet3p;
    throw UsageError("unknown variant '" + s + "' (expected unet, unet2p or unet3p)");
}

/// Architecture description. Levels are indexed 0..levels-1 from full
/// resolution down; encoder level l has base * 2^(l+1) channels.
struct ArchSpec {
    Variant variant = Variant::unet2p;
    bool deep_supervision = false;
    int levels = 5;
    int base_channels = 32;
    int kernel = 3;
    int in_channels = 1;
    int num_classes = 2; // output channels, background included
    bool sqrt2_scale = false;
    int cat_channels = 64; // unet3p per-scale aggregation width

    void validate() const
    {
        if (levels < 2) throw UsageError("levels must be at least 2");
        if (base_channels < 1) throw UsageError("base_channels must be positive");
        if (kernel < 1 || kernel % 2 == 0) throw UsageError("kernel must be a positive odd number");
        if (in_channels < 1) throw UsageError("in_channels must be positive");
        if (num_classes < 2) throw UsageError("num_classes must be at least 2");
        if (cat_channels < 1) throw UsageError("cat_channels must be positive");
        if (deep_supervision && variant == Variant::unet)
            throw UsageError("deep supervision is only defined for unet2p and unet3p");
        if (sqrt2_scale && variant != Variant::unet) throw UsageError("sqrt2 scaling applies to the unet baseline only");
    }

    std::string label() const { return to_string(variant) + (deep_supervision ? "_ds" : ""); }
};

inline void to_json(nlohmann::json& j, const ArchSpec& a)
{
    j = {{"variant", to_string(a.variant)}, {"deep_supervision", a.deep_supervision}, {"levels", a.levels},
         {"base_channels", a.base_channels}, {"kernel", a.kernel}, {"in_channels", a.in_channels},
         {"num_classes", a.num_classes}, {"sqrt2_scale", a.sqrt2_scale}, {"cat_channels", a.cat_channels}};
}

inline void from_json(const nlohmann::json& j, ArchSpec& a)
{
    static const std::vector<std::string> known{"variant", "deep_supervision", "levels", "base_channels", "kernel",
                                                "in_channels", "num_classes", "sqrt2_scale", "cat_channels"};
    for (const auto& [k, v] : j.items())
        if (std::find(known.begin(), known.end(), k) == known.end()) throw UsageError("unknown arch field '" + k + "'");
    if (j.contains("variant")) a.variant = parse_variant(j.at("variant").get<std::string>());
    a.deep_supervision = j.value("deep_supervision", a.deep_supervision);
    a.levels = j.value("levels", a.levels);
    a.base_channels = j.value("base_channels", a.base_channels);
    a.kernel = j.value("kernel", a.kernel);
    a.in_channels = j.value("in_channels", a.in_channels);
    a.num_classes = j.value("num_classes", a.num_classes);
    a.sqrt2_scale = j.value("sqrt2_scale", a.sqrt2_scale);
    a.cat_channels = j.value("cat_channels", a.cat_channels);
}

/// Channel depth of encoder level `level`.
inline std::int64_t encoder_channels(const ArchSpec& a, int level)
{
    const double d = static_cast<double>(a.base_channels) * std::ldexp(1.0, level + 1);
    if (!a.sqrt2_scale) return static_cast<std::int64_t>(d);
    return static_cast<std::int64_t>(std::floor(d * std::sqrt(2.0) + 0.5));
}

/// Channel depth of the decoder output at `level` (the bottleneck counts
/// as decoder level levels-1).
inline std::int64_t decoder_channels(const ArchSpec& a, int level)
{
    if (a.variant == Variant::unet3p && level < a.levels - 1)
        return static_cast<std::int64_t>(a.cat_channels) * a.levels;
    return encoder_channels(a, level);
}

inline std::string encoder_tag(int level) { return "enc" + std::to_string(level); }
inline std::string decoder_tag(int stage) { return "dec" + std::to_string(stage); }
inline std::string mid_tag(int level, int column)
{
    return "mid" + std::to_string(level) + "." + std::to_string(column);
}

// --- closed forms with explicit depths ----------------------------------------

inline std::int64_t unet_stage_formula(std::int64_t f, std::int64_t d_stage, std::int64_t d_below)
{
    return f * f * (d_stage * d_below + d_stage * d_stage + (d_stage + d_stage) * d_stage);
}

inline std::int64_t unet2p_stage_formula(std::int64_t f, std::int64_t d_stage, std::int64_t d_below,
                                         std::int64_t intermediate_nodes)
{
    return f * f * (d_below * d_stage + (d_stage + intermediate_nodes * d_stage + d_stage) * d_stage);
}

/// `encoder_depths` lists the scales at or above the stage, `decoder_depths`
/// those below it (the deepest being the bottleneck).
inline std::int64_t unet3p_stage_formula(std::int64_t f, std::int64_t levels, const std::vector<std::int64_t>& encoder_depths,
                                         const std::vector<std::int64_t>& decoder_depths, std::int64_t cat_channels)
{
    const std::int64_t sum = std::accumulate(encoder_depths.begin(), encoder_depths.end(), std::int64_t{0}) +
                             std::accumulate(decoder_depths.begin(), decoder_depths.end(), std::int64_t{0});
    const std::int64_t agg = cat_channels * levels;
    return f * f * (sum * cat_channels + agg * agg);
}

/// Closed-form convolution-kernel count of decoder stage `stage`
/// (0 = full resolution, levels-2 = just above the bottleneck).
inline std::int64_t formula_params(const ArchSpec& a, int stage)
{
    a.validate();
    if (stage < 0 || stage >= a.levels - 1)
        throw UsageError("decoder stage " + std::to_string(stage) + " out of range [0, " +
                         std::to_string(a.levels - 2) + "]");
    const std::int64_t f = a.kernel;
    switch (a.variant) {
    case Variant::unet: return unet_stage_formula(f, encoder_channels(a, stage), encoder_channels(a, stage + 1));
    case Variant::unet2p:
        return unet2p_stage_formula(f, encoder_channels(a, stage), encoder_channels(a, stage + 1),
                                    a.levels - 2 - stage);
    case Variant::unet3p: {
        std::vector<std::int64_t> enc, dec;
        for (int m = 0; m <= stage; ++m) enc.push_back(encoder_channels(a, m));
        for (int m = stage + 1; m < a.levels; ++m) dec.push_back(decoder_channels(a, m));
        return unet3p_stage_formula(f, a.levels, enc, dec, a.cat_channels);
    }
    }
    return 0;
}

// --- graph builders ------------------------------------------------------------

namespace detail {

template <typename T>
int conv_bn_relu(nn::Graph<T>& g, int x, std::int64_t out, int k, const std::string& stage, const std::string& name)
{
    const int c = g.conv(x, static_cast<int>(out), k, stage, name + ".conv");
    return g.relu(g.batchnorm(c, stage, name + ".bn"));
}

template <typename T>
std::vector<int> build_encoder(nn::Graph<T>& g, const ArchSpec& a)
{
    std::vector<int> enc;
    int x = nn::Graph<T>::input();
    for (int l = 0; l < a.levels; ++l) {
        if (l > 0) x = g.maxpool(enc.back(), 2);
        const auto d = encoder_channels(a, l);
        const auto tag = encoder_tag(l);
        x = conv_bn_relu(g, x, d, a.kernel, tag, tag + ".a");
        x = conv_bn_relu(g, x, d, a.kernel, tag, tag + ".b");
        enc.push_back(x);
    }
    return enc;
}

template <typename T>
int head(nn::Graph<T>& g, const ArchSpec& a, int x, const std::string& stage, const std::string& name)
{
    int y = g.conv(x, a.num_classes, 1, stage, name);
    const int level = g.node(x).level;
    if (level > 0) y = g.upsample(y, 1 << level, true);
    return y;
}

} // namespace detail

/// Builds the graph; the first output is always the full-resolution head.
template <typename T>
nn::Graph<T> build(const ArchSpec& a)
{
    a.validate();
    nn::Graph<T> g(a.in_channels);
    const auto enc = detail::build_encoder(g, a);
    const int n = a.levels;
    std::vector<int> outputs;
    std::vector<std::pair<int, std::string>> aux; // deep-supervision sources

    if (a.variant == Variant::unet) {
        int below = enc[n - 1];
        for (int s = n - 2; s >= 0; --s) {
            const auto d = encoder_channels(a, s);
            const auto tag = decoder_tag(s);
            const int up = g.tconv2x(below, static_cast<int>(d), a.kernel, tag, tag + ".up");
            const int cat = g.concat({enc[s], up});
            int x = detail::conv_bn_relu(g, cat, d, a.kernel, tag, tag + ".a");
            below = detail::conv_bn_relu(g, x, d, a.kernel, tag, tag + ".b");
        }
        outputs.push_back(detail::head(g, a, below, "head", "head"));
    }
    else if (a.variant == Variant::unet2p) {
        // node[i][k]: level i, column k; column 0 is the encoder.
        std::vector<std::vector<int>> node(n);
        for (int i = 0; i < n; ++i) node[i].push_back(enc[i]);
        for (int k = 1; k < n; ++k)
            for (int i = 0; i + k < n; ++i) {
                const auto d = encoder_channels(a, i);
                const bool is_decoder = i + k == n - 1;
                const auto tag = is_decoder ? decoder_tag(i) : mid_tag(i, k);
                const int up = g.tconv2x(node[i + 1][k - 1], static_cast<int>(d), a.kernel, tag, tag + ".up");
                std::vector<int> parts(node[i].begin(), node[i].end());
                parts.push_back(up);
                node[i].push_back(detail::conv_bn_relu(g, g.concat(parts), d, a.kernel, tag, tag + ".agg"));
                if (!(is_decoder && i == 0)) aux.emplace_back(node[i].back(), tag);
            }
        outputs.push_back(detail::head(g, a, node[0][n - 1], "head", "head"));
    }
    else {
        std::vector<int> dec(n, -1);
        dec[n - 1] = enc[n - 1];
        for (int s = n - 2; s >= 0; --s) {
            const auto tag = decoder_tag(s);
            std::vector<int> parts;
            for (int m = 0; m < n; ++m) {
                int src = m <= s ? enc[m] : dec[m];
                if (m < s) src = g.maxpool(src, 1 << (s - m));
                if (m > s) src = g.upsample(src, 1 << (m - s), true);
                parts.push_back(detail::conv_bn_relu(g, src, a.cat_channels, a.kernel, tag,
                                                     tag + ".from" + std::to_string(m)));
            }
            dec[s] = detail::conv_bn_relu(g, g.concat(parts), static_cast<std::int64_t>(a.cat_channels) * n, a.kernel,
                                          tag, tag + ".agg");
            if (s > 0) aux.emplace_back(dec[s], tag);
        }
        outputs.push_back(detail::head(g, a, dec[0], "head", "head"));
    }
    if (a.deep_supervision)
        for (const auto& [x, tag] : aux) outputs.push_back(detail::head(g, a, x, "ds_head", "ds_head." + tag));
    g.set_outputs(outputs);
    return g;
}

struct StageCount {
    std::int64_t kernels = 0;
    std::int64_t biases = 0;
    std::int64_t batchnorm = 0;

    std::int64_t total() const { return kernels + biases + batchnorm; }
};

struct ParamCount {
    std::int64_t total = 0;
    std::map<std::string, StageCount> by_stage;
};

template <typename T>
ParamCount count_params(const nn::Graph<T>& g)
{
    ParamCount pc;
    for (const auto& p : g.params()) {
        std::int64_t n = 1;
        for (int s : p.shape) n *= s;
        auto& sc = pc.by_stage[p.stage];
        switch (p.role) {
        case nn::ParamRole::kernel: sc.kernels += n; break;
        case nn::ParamRole::bias: sc.biases += n; break;
        case nn::ParamRole::bn_scale:
        case nn::ParamRole::bn_shift: sc.batchnorm += n; break;
        }
        pc.total += n;
    }
    return pc;
}

struct StageAudit {
    int stage = 0;
    std::int64_t formula = 0;
    std::int64_t graph = 0;

    std::int64_t delta() const { return graph - formula; }
};

/// Formula vs constructed-graph kernel counts for every decoder stage.
inline std::vector<StageAudit> audit_params(const ArchSpec& a)
{
    const auto g = build<float>(a);
    const auto pc = count_params(g);
    std::vector<StageAudit> rows;
    for (int s = 0; s < a.levels - 1; ++s) {
        const auto it = pc.by_stage.find(decoder_tag(s));
        rows.push_back({s, formula_params(a, s), it == pc.by_stage.end() ? 0 : it->second.kernels});
    }
    return rows;
}

} // namespace mpunet

#endif // MPUNET_UNETZOO_HPP
