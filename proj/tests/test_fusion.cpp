#include <gtest/gtest.h>

#include <cmath>

#include "mpunet/fusion.hpp"
#include "test_util.hpp"

using namespace mpunet;

namespace {

ProbVolume probs_from(std::array<int, 3> shape, int classes, std::vector<float> data)
{
    ProbVolume p(Geometry{shape, {1, 1, 1}, {}}, classes);
    p.data = std::move(data);
    return p;
}

/// Random probability volume with a controllable bias towards `truth`.
ProbVolume noisy_plane(const LabelVolume& truth, int classes, double accuracy, Rng& rng)
{
    ProbVolume p(truth.geom, classes);
    for (std::size_t v = 0; v < truth.data.size(); ++v) {
        double sum = 0.0;
        std::vector<double> row(classes);
        for (int c = 0; c < classes; ++c) sum += row[c] = uniform01(rng) + (c == truth.data[v] ? accuracy : 0.0);
        for (int c = 0; c < classes; ++c) p.data[v * classes + c] = static_cast<float>(row[c] / sum);
    }
    return p;
}

LabelVolume random_truth(std::array<int, 3> shape, int classes, Rng& rng)
{
    LabelVolume t(Geometry{shape, {1, 1, 1}, {}}, 1, classes - 1);
    for (auto& x : t.data) x = static_cast<std::uint8_t>(uniform_index(rng, classes));
    return t;
}

} // namespace

TEST(Fuse, HandWorkedTwoPlaneExample)
{
    const std::vector<ProbVolume> probs{probs_from({1, 1, 1}, 2, {0.9f, 0.1f}), probs_from({1, 1, 1}, 2, {0.2f, 0.8f})};
    FusionParams fp = FusionParams::uniform(2, 2);
    fp.weights = {1, 0, 0, 2};
    const auto r = fuse(probs, fp);
    EXPECT_NEAR(r.scores.data[0], 0.9, 1e-6);
    EXPECT_NEAR(r.scores.data[1], 1.6, 1e-6);
    EXPECT_EQ(r.labels.data[0], 1);
}

TEST(Fuse, IdentityAndAveraging)
{
    Rng rng(1);
    const auto truth = random_truth({5, 6, 7}, 4, rng);
    const std::vector<ProbVolume> one{noisy_plane(truth, 4, 0.3, rng)};
    FusionParams id = FusionParams::uniform(1, 4);
    EXPECT_EQ(fuse(one, id).labels.data, argmax_labels(one[0]).data);

    const std::vector<ProbVolume> three{noisy_plane(truth, 4, 0.3, rng), noisy_plane(truth, 4, 0.3, rng),
                                        noisy_plane(truth, 4, 0.3, rng)};
    const auto r = fuse(three, FusionParams::uniform(3, 4));
    for (std::size_t i = 0; i < r.scores.data.size(); ++i) {
        const double avg = (three[0].data[i] + three[1].data[i] + three[2].data[i]) / 3.0;
        EXPECT_NEAR(r.scores.data[i], avg, 1e-6);
    }
}

TEST(Fuse, TiesGoToLowestClass)
{
    const std::vector<ProbVolume> probs{probs_from({1, 1, 1}, 3, {0.2f, 0.4f, 0.4f})};
    EXPECT_EQ(fuse(probs, FusionParams::uniform(1, 3)).labels.data[0], 1);
}

TEST(Fuse, PermutingPlanesWithWeightRows)
{
    Rng rng(2);
    const auto truth = random_truth({4, 4, 4}, 3, rng);
    std::vector<ProbVolume> probs;
    for (int k = 0; k < 3; ++k) probs.push_back(noisy_plane(truth, 3, 0.5, rng));
    FusionParams fp = FusionParams::uniform(3, 3);
    for (auto& w : fp.weights) w = uniform(rng, -1.0, 2.0);
    for (auto& b : fp.bias) b = uniform(rng, -0.5, 0.5);
    const auto base = fuse(probs, fp);

    const std::array<int, 3> perm{2, 0, 1};
    std::vector<ProbVolume> pp;
    FusionParams fq = fp;
    for (int k = 0; k < 3; ++k) {
        pp.push_back(probs[perm[k]]);
        for (int c = 0; c < 3; ++c) fq.w(k, c) = fp.w(perm[k], c);
    }
    const auto permuted = fuse(pp, fq);
    for (std::size_t i = 0; i < base.scores.data.size(); ++i)
        EXPECT_NEAR(permuted.scores.data[i], base.scores.data[i], 1e-6);
    EXPECT_EQ(permuted.labels.data, base.labels.data);
}

TEST(Fuse, BiasShiftLeavesLabelsUnchanged)
{
    Rng rng(3);
    const auto truth = random_truth({6, 5, 4}, 4, rng);
    std::vector<ProbVolume> probs{noisy_plane(truth, 4, 0.2, rng), noisy_plane(truth, 4, 0.2, rng)};
    FusionParams fp = FusionParams::uniform(2, 4);
    fp.bias = {0.1, -0.2, 0.05, 0.0};
    const auto a = fuse(probs, fp);
    for (auto& b : fp.bias) b += 3.0;
    EXPECT_EQ(fuse(probs, fp).labels.data, a.labels.data);
}

TEST(Fuse, SoftmaxOfScoresIsNormalised)
{
    Rng rng(4);
    const auto truth = random_truth({4, 4, 4}, 3, rng);
    std::vector<ProbVolume> probs{noisy_plane(truth, 3, 0.2, rng)};
    FusionParams fp = FusionParams::uniform(1, 3);
    fp.weights = {4.0, -3.0, 7.0};
    const auto r = fuse(probs, fp);
    for (std::size_t v = 0; v < truth.data.size(); ++v) {
        const float* z = &r.scores.data[v * 3];
        const double mx = std::max({z[0], z[1], z[2]});
        double s = 0.0, e[3];
        for (int c = 0; c < 3; ++c) s += e[c] = std::exp(z[c] - mx);
        double total = 0.0;
        for (double x : e) total += x / s;
        EXPECT_NEAR(total, 1.0, 1e-6);
    }
}

TEST(Fuse, Errors)
{
    const auto a = probs_from({1, 1, 2}, 2, {0.5f, 0.5f, 1.0f, 0.0f});
    const auto wrong_shape = probs_from({1, 2, 1}, 2, {0.5f, 0.5f, 1.0f, 0.0f});
    const auto wrong_classes = probs_from({1, 1, 1}, 4, {0.25f, 0.25f, 0.25f, 0.25f});
    const auto unnormalised = probs_from({1, 1, 2}, 2, {0.5f, 0.6f, 1.0f, 0.0f});
    EXPECT_THROW(fuse(std::vector<ProbVolume>{a, wrong_shape}, FusionParams::uniform(2, 2)), DataError);
    EXPECT_THROW(fuse(std::vector<ProbVolume>{wrong_classes}, FusionParams::uniform(1, 2)), DataError);
    EXPECT_THROW(fuse(std::vector<ProbVolume>{a}, FusionParams::uniform(2, 2)), DataError);
    EXPECT_THROW(fuse(std::vector<ProbVolume>{unnormalised}, FusionParams::uniform(1, 2)), DataError);
    FusionParams bad = FusionParams::uniform(1, 2);
    bad.weights[0] = NAN;
    EXPECT_THROW(fuse(std::vector<ProbVolume>{a}, bad), NumericError);
}

TEST(FusionFit, GradientMatchesFiniteDifferences)
{
    Rng rng(5);
    const auto truth = random_truth({3, 3, 3}, 3, rng);
    const std::vector<std::vector<ProbVolume>> probs{{noisy_plane(truth, 3, 0.5, rng), noisy_plane(truth, 3, 0.1, rng)}};
    const auto s = sample_fusion_voxels(probs, {truth}, {});
    FusionParams p = FusionParams::uniform(2, 3);
    for (auto& w : p.weights) w = uniform(rng, -1.0, 1.0);
    for (auto& b : p.bias) b = uniform(rng, -1.0, 1.0);
    std::vector<double> gw, gb;
    fusion_cross_entropy(s, p, &gw, &gb);
    const double h = 1e-6;
    for (std::size_t i = 0; i < p.weights.size(); ++i) {
        auto q = p;
        q.weights[i] += h;
        const double up = fusion_cross_entropy(s, q);
        q.weights[i] -= 2 * h;
        EXPECT_NEAR(gw[i], (up - fusion_cross_entropy(s, q)) / (2 * h), 1e-7);
    }
    for (std::size_t i = 0; i < p.bias.size(); ++i) {
        auto q = p;
        q.bias[i] += h;
        const double up = fusion_cross_entropy(s, q);
        q.bias[i] -= 2 * h;
        EXPECT_NEAR(gb[i], (up - fusion_cross_entropy(s, q)) / (2 * h), 1e-7);
    }
}

TEST(FusionFit, NeverWorseThanUniformAveraging)
{
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(seed);
        const auto truth = random_truth({8, 8, 8}, 3, rng);
        const auto plane = noisy_plane(truth, 3, 0.4, rng);
        const std::vector<std::vector<ProbVolume>> copies{{plane, plane, plane}};
        FusionFitConfig cfg;
        cfg.seed = seed;
        const auto fit = fit_fusion(copies, {truth}, cfg);
        const auto s = sample_fusion_voxels(copies, {truth}, cfg);
        EXPECT_DOUBLE_EQ(fit.initial_loss, fusion_cross_entropy(s, FusionParams::uniform(3, 3)));
        EXPECT_LE(fit.final_loss, fit.initial_loss);
        EXPECT_DOUBLE_EQ(fit.final_loss, fusion_cross_entropy(s, fit.params));
    }
}

TEST(FusionFit, AccuratePlaneOutweighsRandomPlane)
{
    Rng rng(6);
    const auto truth = random_truth({10, 10, 4}, 2, rng);
    ProbVolume accurate(truth.geom, 2), random(truth.geom, 2);
    for (std::size_t v = 0; v < truth.data.size(); ++v) {
        accurate.data[v * 2 + truth.data[v]] = 0.95f;
        accurate.data[v * 2 + 1 - truth.data[v]] = 0.05f;
        const float r = static_cast<float>(uniform01(rng));
        random.data[v * 2] = r;
        random.data[v * 2 + 1] = 1.0f - r;
    }
    const std::vector<std::vector<ProbVolume>> probs{{accurate, random}};
    FusionFitConfig cfg;
    cfg.steps = 400;
    cfg.step_size = 1.0;
    const auto fit = fit_fusion(probs, {truth}, cfg);
    const double acc_w = (std::abs(fit.params.w(0, 0)) + std::abs(fit.params.w(0, 1))) / 2;
    const double rnd_w = (std::abs(fit.params.w(1, 0)) + std::abs(fit.params.w(1, 1))) / 2;
    EXPECT_GT(acc_w, rnd_w);

    // Coarse grid search over the 2x2 weights (zero bias) as an oracle.
    const auto s = sample_fusion_voxels(probs, {truth}, cfg);
    double best = INFINITY;
    FusionParams best_p = FusionParams::uniform(2, 2);
    FusionParams p = FusionParams::uniform(2, 2);
    for (double a = -4; a <= 4; a += 1)
        for (double b = -4; b <= 4; b += 1)
            for (double c = -4; c <= 4; c += 1)
                for (double d = -4; d <= 4; d += 1) {
                    p.weights = {a, b, c, d};
                    const double l = fusion_cross_entropy(s, p);
                    if (l < best) {
                        best = l;
                        best_p = p;
                    }
                }
    EXPECT_GT(std::abs(best_p.w(0, 0)) + std::abs(best_p.w(0, 1)), std::abs(best_p.w(1, 0)) + std::abs(best_p.w(1, 1)));
    EXPECT_LT(fit.final_loss, fit.initial_loss);
}

TEST(FusionFit, SinglePlaneKeepsItsArgmax)
{
    // Background-majority truth and a confident plane, as a trained network gives.
    Rng rng(7);
    LabelVolume truth(Geometry{{12, 12, 12}, {1, 1, 1}, {}}, 1, 3);
    for (auto& x : truth.data) x = uniform01(rng) < 0.7 ? 0 : static_cast<std::uint8_t>(1 + uniform_index(rng, 3));
    const auto plane = noisy_plane(truth, 4, 5.0, rng);
    const std::vector<std::vector<ProbVolume>> probs{{plane}};
    FusionFitConfig cfg;
    const auto fit = fit_fusion(probs, {truth}, cfg);
    const auto s = sample_fusion_voxels(probs, {truth}, cfg);
    std::size_t agree = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        const double* pr = &s.probs[i * 4];
        int plane_arg = 0, fused_arg = 0;
        double best = -INFINITY;
        for (int c = 0; c < 4; ++c) {
            if (pr[c] > pr[plane_arg]) plane_arg = c;
            const double z = fit.params.w(0, c) * pr[c] + fit.params.bias[c];
            if (z > best) {
                best = z;
                fused_arg = c;
            }
        }
        agree += plane_arg == fused_arg;
    }
    EXPECT_GE(static_cast<double>(agree) / s.size(), 0.99);
}

TEST(FusionFit, SubsampleIsClassBalanced)
{
    Rng rng(8);
    LabelVolume truth(Geometry{{10, 10, 10}, {1, 1, 1}, {}}, 1, 2);
    for (std::size_t v = 0; v < 50; ++v) truth.data[v * 7] = static_cast<std::uint8_t>(1 + v % 2);
    const std::vector<std::vector<ProbVolume>> probs{{noisy_plane(truth, 3, 0.5, rng)}};
    FusionFitConfig cfg;
    cfg.max_voxels = 400;
    const auto s = sample_fusion_voxels(probs, {truth}, cfg);
    std::size_t fg = 0;
    for (auto t : s.truth) fg += t != 0;
    EXPECT_EQ(s.size(), 400u);
    EXPECT_EQ(fg, 200u);
    cfg.seed = 1;
    EXPECT_EQ(sample_fusion_voxels(probs, {truth}, cfg).size(), 400u);
}

TEST(FusionFit, Errors)
{
    Rng rng(9);
    LabelVolume empty(Geometry{{3, 3, 3}, {1, 1, 1}, {}}, 1, 1);
    const std::vector<std::vector<ProbVolume>> probs{{noisy_plane(empty, 2, 0.5, rng)}};
    EXPECT_THROW(fit_fusion(probs, {empty}), DataError);
    EXPECT_THROW(fit_fusion({}, {}), DataError);
}

TEST(FusionJson, RoundTrip)
{
    testutil::TempDir dir("fusion");
    FusionParams p = FusionParams::uniform(3, 2);
    p.weights = {0.1, -0.25, 1.0 / 3.0, 2.0, 1e-17, 5.5};
    p.bias = {0.125, -7.0};
    p.planes = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    save_fusion(p, dir / "f.json");
    const auto q = load_fusion(dir / "f.json");
    EXPECT_EQ(q.weights, p.weights);
    EXPECT_EQ(q.bias, p.bias);
    EXPECT_EQ(q.planes, p.planes);
    std::ofstream(dir / "bad.json") << R"({"views": 2, "classes": 2, "weights": [[1, 0]], "bias": [0, 0]})";
    EXPECT_THROW(load_fusion(dir / "bad.json"), DataError);
    std::ofstream(dir / "broken.json") << "{";
    EXPECT_THROW(load_fusion(dir / "broken.json"), DataError);
}
