#ifndef MPUNET_FUSION_HPP
#define MPUNET_FUSION_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mpunet/core/error.hpp"
#include "mpunet/core/rng.hpp"
#include "mpunet/core/vec3.hpp"
#include "mpunet/multiplanar.hpp"
#include "mpunet/volume.hpp"

namespace mpunet {

/// Linear fusion: z_c = sum_k weights(k, c) * p_{k,c} + bias_c.
struct FusionParams {
    int views = 0;
    int classes = 0;
    std::vector<double> weights; // views x classes, row-major
    std::vector<double> bias;    // classes
    std::vector<Vec3> planes;    // optional, for provenance of the view order

    double& w(int k, int c) { return weights[static_cast<std::size_t>(k) * classes + c]; }
    double w(int k, int c) const { return weights[static_cast<std::size_t>(k) * classes + c]; }

    static FusionParams uniform(int views, int classes)
    {
        if (views < 1 || classes < 2) throw UsageError("fusion needs at least one view and two classes");
        FusionParams p;
        p.views = views;
        p.classes = classes;
        p.weights.assign(static_cast<std::size_t>(views) * classes, 1.0 / views);
        p.bias.assign(classes, 0.0);
        return p;
    }

    void validate() const
    {
        if (views < 1 || classes < 2) throw DataError("fusion parameters have invalid dimensions");
        if (weights.size() != static_cast<std::size_t>(views) * classes || bias.size() != static_cast<std::size_t>(classes))
            throw DataError("fusion parameter arrays do not match views x classes");
        for (double x : weights)
            if (!std::isfinite(x)) throw NumericError("non-finite fusion weight");
        for (double x : bias)
            if (!std::isfinite(x)) throw NumericError("non-finite fusion bias");
        if (!planes.empty() && static_cast<int>(planes.size()) != views)
            throw DataError("fusion plane list does not match the view count");
    }
};

inline nlohmann::json fusion_to_json(const FusionParams& p)
{
    nlohmann::json w = nlohmann::json::array();
    for (int k = 0; k < p.views; ++k) {
        nlohmann::json row = nlohmann::json::array();
        for (int c = 0; c < p.classes; ++c) row.push_back(p.w(k, c));
        w.push_back(row);
    }
    nlohmann::json planes = nlohmann::json::array();
    for (const auto& v : p.planes) planes.push_back({v[0], v[1], v[2]});
    return {{"views", p.views}, {"classes", p.classes}, {"planes", planes}, {"weights", w}, {"bias", p.bias}};
}

inline FusionParams fusion_from_json(const nlohmann::json& j)
{
    try {
        FusionParams p;
        p.views = j.at("views").get<int>();
        p.classes = j.at("classes").get<int>();
        for (const auto& row : j.at("weights"))
            for (const auto& x : row) p.weights.push_back(x.get<double>());
        p.bias = j.at("bias").get<std::vector<double>>();
        if (j.contains("planes"))
            for (const auto& v : j.at("planes")) p.planes.push_back({v.at(0), v.at(1), v.at(2)});
        p.validate();
        return p;
    }
    catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed fusion parameters: ") + e.what());
    }
}

inline void save_fusion(const FusionParams& p, const std::filesystem::path& path)
{
    std::ofstream out(path);
    if (!out) throw DataError("cannot write " + path.string());
    out << fusion_to_json(p).dump(2) << '\n';
}

inline FusionParams load_fusion(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path.string());
    try {
        return fusion_from_json(nlohmann::json::parse(in));
    }
    catch (const nlohmann::json::parse_error& e) {
        throw DataError("malformed fusion parameters: " + std::string(e.what()));
    }
}

namespace detail {

inline void check_views(std::span<const ProbVolume> probs, int views, int classes)
{
    if (static_cast<int>(probs.size()) != views)
        throw DataError("expected " + std::to_string(views) + " probability volumes, got " +
                        std::to_string(probs.size()));
    for (const auto& p : probs) {
        require_same_shape(probs[0].geom, p.geom, "fusion");
        if (p.channels != classes) throw DataError("probability volume class count does not match fusion parameters");
        const std::size_t n = p.geom.voxel_count();
        for (std::size_t v = 0; v < n; ++v) {
            double s = 0.0;
            for (int c = 0; c < classes; ++c) s += p.data[v * classes + c];
            if (std::abs(s - 1.0) > 1e-5) throw DataError("probability vector does not sum to 1");
        }
    }
}

inline int argmax_row(const double* z, int classes)
{
    int best = 0;
    for (int c = 1; c < classes; ++c)
        if (z[c] > z[best]) best = c;
    return best;
}

} // namespace detail

struct FusionResult {
    ProbVolume scores; // z, one channel per class
    LabelVolume labels;
};

inline FusionResult fuse(std::span<const ProbVolume> probs, const FusionParams& fp)
{
    fp.validate();
    detail::check_views(probs, fp.views, fp.classes);
    const auto& geom = probs[0].geom;
    const int nc = fp.classes;
    FusionResult r{ProbVolume(geom, nc), LabelVolume(geom, 1, nc - 1)};
    const std::size_t n = geom.voxel_count();
    std::vector<double> z(nc);
    for (std::size_t v = 0; v < n; ++v) {
        for (int c = 0; c < nc; ++c) {
            double s = fp.bias[c];
            for (int k = 0; k < fp.views; ++k) s += fp.w(k, c) * probs[k].data[v * nc + c];
            z[c] = s;
            r.scores.data[v * nc + c] = static_cast<float>(s);
        }
        r.labels.data[v] = static_cast<std::uint8_t>(detail::argmax_row(z.data(), nc));
    }
    return r;
}

/// Voxel subsample used for fitting: per-view probabilities plus truth.
struct FusionSamples {
    int views = 0;
    int classes = 0;
    std::vector<double> probs; // samples x views x classes
    std::vector<std::uint8_t> truth;

    std::size_t size() const { return truth.size(); }
};

struct FusionFitConfig {
    int steps = 200;
    double step_size = 0.1;
    std::size_t max_voxels = 1'000'000;
    std::uint64_t seed = 0;
};

struct FusionFit {
    FusionParams params;
    double initial_loss = 0.0; // uniform averaging
    double final_loss = 0.0;
    std::size_t samples = 0;
};

/// Mean cross-entropy of softmax(z) on the samples; optional gradient.
inline double fusion_cross_entropy(const FusionSamples& s, const FusionParams& p, std::vector<double>* gw = nullptr,
                                   std::vector<double>* gb = nullptr)
{
    const int nc = s.classes, nv = s.views;
    if (gw) gw->assign(p.weights.size(), 0.0);
    if (gb) gb->assign(p.bias.size(), 0.0);
    std::vector<double> z(nc);
    double total = 0.0;
    const double inv = 1.0 / static_cast<double>(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double* pr = s.probs.data() + i * nv * nc;
        for (int c = 0; c < nc; ++c) {
            double v = p.bias[c];
            for (int k = 0; k < nv; ++k) v += p.w(k, c) * pr[k * nc + c];
            z[c] = v;
        }
        const double mx = *std::max_element(z.begin(), z.end());
        double sum = 0.0;
        for (int c = 0; c < nc; ++c) sum += std::exp(z[c] - mx);
        const int y = s.truth[i];
        total += std::log(sum) - (z[y] - mx);
        if (gw) {
            for (int c = 0; c < nc; ++c) {
                const double d = (std::exp(z[c] - mx) / sum - (c == y ? 1.0 : 0.0)) * inv;
                (*gb)[c] += d;
                for (int k = 0; k < nv; ++k) (*gw)[static_cast<std::size_t>(k) * nc + c] += d * pr[k * nc + c];
            }
        }
    }
    return total * inv;
}

/// Class-balanced voxel subsample: background drawn without replacement up
/// to half the budget, foreground resampled to the same count.
inline FusionSamples sample_fusion_voxels(const std::vector<std::vector<ProbVolume>>& subject_probs,
                                          const std::vector<LabelVolume>& truth, const FusionFitConfig& cfg)
{
    if (subject_probs.empty()) throw DataError("fusion fitting needs at least one validation subject");
    if (subject_probs.size() != truth.size()) throw DataError("fusion fitting: one label volume per subject is required");
    const int nv = static_cast<int>(subject_probs[0].size());
    if (nv < 1) throw DataError("fusion fitting: no views");
    const int nc = subject_probs[0][0].channels;
    std::vector<std::pair<std::uint32_t, std::uint32_t>> fg, bg;
    for (std::size_t s = 0; s < truth.size(); ++s) {
        detail::check_views(subject_probs[s], nv, nc);
        require_same_shape(subject_probs[s][0].geom, truth[s].geom, "fusion fitting");
        for (std::size_t v = 0; v < truth[s].data.size(); ++v) {
            if (truth[s].data[v] >= nc) throw DataError("label exceeds the probability class count");
            (truth[s].data[v] == 0 ? bg : fg).emplace_back(static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(v));
        }
    }
    if (fg.empty()) throw DataError("no foreground voxels in the validation labels");
    Rng rng(cfg.seed);
    const std::size_t budget = std::max<std::size_t>(cfg.max_voxels, 2);
    auto take_subset = [&](auto& pool, std::size_t n) {
        // partial Fisher-Yates
        for (std::size_t i = 0; i < n; ++i) std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);
        pool.resize(n);
    };
    std::size_t n_bg = std::min(bg.size(), budget / 2);
    take_subset(bg, n_bg);
    const std::size_t n_fg = n_bg > 0 ? n_bg : std::min(fg.size(), budget);
    std::vector<std::pair<std::uint32_t, std::uint32_t>> fg_pick;
    if (fg.size() >= n_fg) {
        take_subset(fg, n_fg);
        fg_pick = fg;
    }
    else {
        fg_pick = fg;
        while (fg_pick.size() < n_fg) fg_pick.push_back(fg[uniform_index(rng, fg.size())]);
    }
    FusionSamples out;
    out.views = nv;
    out.classes = nc;
    auto add = [&](const std::pair<std::uint32_t, std::uint32_t>& sv) {
        const auto& [s, v] = sv;
        for (int k = 0; k < nv; ++k)
            for (int c = 0; c < nc; ++c) out.probs.push_back(subject_probs[s][k].data[static_cast<std::size_t>(v) * nc + c]);
        out.truth.push_back(truth[s].data[v]);
    };
    out.probs.reserve((bg.size() + fg_pick.size()) * nv * nc);
    for (const auto& sv : bg) add(sv);
    for (const auto& sv : fg_pick) add(sv);
    return out;
}

/// Full-batch gradient descent from uniform averaging; a step that does not
/// decrease the loss is rejected and the step size halved.
inline FusionFit fit_fusion_samples(const FusionSamples& s, const FusionFitConfig& cfg)
{
    FusionFit fit;
    fit.params = FusionParams::uniform(s.views, s.classes);
    fit.samples = s.size();
    std::vector<double> gw, gb;
    double loss = fusion_cross_entropy(s, fit.params, &gw, &gb);
    fit.initial_loss = loss;
    double eta = cfg.step_size;
    for (int step = 0; step < cfg.steps; ++step) {
        FusionParams trial = fit.params;
        for (std::size_t i = 0; i < gw.size(); ++i) trial.weights[i] -= eta * gw[i];
        for (std::size_t i = 0; i < gb.size(); ++i) trial.bias[i] -= eta * gb[i];
        std::vector<double> tw, tb;
        const double l = fusion_cross_entropy(s, trial, &tw, &tb);
        if (l < loss) {
            fit.params = std::move(trial);
            loss = l;
            gw = std::move(tw);
            gb = std::move(tb);
        }
        else {
            eta *= 0.5;
        }
    }
    fit.final_loss = loss;
    return fit;
}

inline FusionFit fit_fusion(const std::vector<std::vector<ProbVolume>>& subject_probs,
                            const std::vector<LabelVolume>& truth, const FusionFitConfig& cfg = {})
{
    return fit_fusion_samples(sample_fusion_voxels(subject_probs, truth, cfg), cfg);
}

} // namespace mpunet

#endif // MPUNET_FUSION_HPP
