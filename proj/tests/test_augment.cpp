#include <gtest/gtest.h>

#include <set>

#include "mpunet/augment.hpp"

using namespace mpunet;

namespace {

std::pair<Image2D<float>, Image2D<std::uint8_t>> stripes(int rows, int cols)
{
    Image2D<float> img{rows, cols, 1, std::vector<float>(static_cast<std::size_t>(rows) * cols)};
    Image2D<std::uint8_t> lab{rows, cols, 1, std::vector<std::uint8_t>(img.data.size())};
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            img.at(r, c) = static_cast<float>(std::sin(0.3 * r) + 0.1 * c);
            lab.at(r, c) = static_cast<std::uint8_t>(((r / 5) % 2) * 2 + (c > cols / 2 ? 3 : 0));
        }
    return {img, lab};
}

} // namespace

TEST(Elastic, ZeroMagnitudeIsIdentity)
{
    const auto [img, lab] = stripes(32, 40);
    ElasticParams p;
    p.magnitude_range = {0.0, 0.0};
    p.probability = 1.0;
    Rng rng(1);
    ElasticDraw d;
    const auto [img2, lab2] = elastic_deform(img, lab, p, rng, &d);
    EXPECT_TRUE(d.applied);
    EXPECT_EQ(img2, img);
    EXPECT_EQ(lab2, lab);
}

TEST(Elastic, LabelsKeepTheirClassSet)
{
    const auto [img, lab] = stripes(48, 48);
    const std::set<std::uint8_t> classes(lab.data.begin(), lab.data.end());
    ElasticParams p;
    p.probability = 1.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng rng(seed);
        const auto out = elastic_deform(img, lab, p, rng);
        for (auto v : out.second.data) EXPECT_TRUE(classes.count(v)) << int(v);
    }
}

TEST(Elastic, DeformsWhenMagnitudeIsLarge)
{
    const auto [img, lab] = stripes(48, 48);
    ElasticParams p;
    p.probability = 1.0;
    p.magnitude_range = {400.0, 450.0};
    Rng rng(3);
    const auto out = elastic_deform(img, lab, p, rng);
    EXPECT_NE(out.first, img);
}

TEST(Elastic, DeterministicGivenState)
{
    const auto [img, lab] = stripes(24, 24);
    ElasticParams p;
    p.probability = 1.0;
    Rng a(42), b(42);
    EXPECT_EQ(elastic_deform(img, lab, p, a), elastic_deform(img, lab, p, b));
}

TEST(Elastic, ApplicationRate)
{
    const auto [img, lab] = stripes(4, 4);
    ElasticParams p;
    p.smoothing_range = {0.0, 0.0};
    Rng rng(2024);
    int applied = 0;
    for (int i = 0; i < 10000; ++i) {
        ElasticDraw d;
        elastic_deform(img, lab, p, rng, &d);
        applied += d.applied;
        if (d.applied) {
            EXPECT_GE(d.magnitude, 0.0);
            EXPECT_LE(d.magnitude, 450.0);
        }
    }
    EXPECT_NEAR(applied / 10000.0, 1.0 / 3.0, 0.02);
}

TEST(Elastic, FieldPeakIsNormalisedByWidth)
{
    Rng rng(5);
    const auto d = elastic_field(20, 50, 3.0, 100.0, rng);
    double peak = 0.0;
    for (std::size_t i = 0; i < d[0].size(); ++i) peak = std::max(peak, std::hypot(d[0][i], d[1][i]));
    EXPECT_NEAR(peak, 100.0 / 50.0, 1e-12);
}

TEST(Elastic, ShapeMismatchAndBadParams)
{
    const auto [img, lab] = stripes(8, 8);
    const auto [img2, lab2] = stripes(8, 6);
    ElasticParams p;
    Rng rng(0);
    EXPECT_THROW(elastic_deform(img, lab2, p, rng), DataError);
    p.probability = 1.5;
    EXPECT_THROW(p.validate(), UsageError);
    p = {};
    p.magnitude_range = {10.0, 5.0};
    EXPECT_THROW(p.validate(), UsageError);
}

TEST(Affine, DisabledIsIdentityAndConsumesNothing)
{
    const auto [img, lab] = stripes(16, 16);
    AffineParams p;
    Rng rng(9), ref(9);
    const auto out = affine_deform(img, lab, p, rng);
    EXPECT_EQ(out.first, img);
    EXPECT_EQ(out.second, lab);
    EXPECT_EQ(rng(), ref());
}

TEST(Affine, EnabledKeepsClassesAndIsDeterministic)
{
    const auto [img, lab] = stripes(32, 32);
    const std::set<std::uint8_t> classes(lab.data.begin(), lab.data.end());
    AffineParams p;
    p.enabled = true;
    p.probability = 1.0;
    Rng a(4), b(4);
    const auto x = affine_deform(img, lab, p, a);
    EXPECT_EQ(x, affine_deform(img, lab, p, b));
    EXPECT_NE(x.first, img);
    for (auto v : x.second.data) EXPECT_TRUE(classes.count(v));
}
