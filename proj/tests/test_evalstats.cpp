#include <gtest/gtest.h>

#include <bit>
#include <cmath>
#include <numbers>

#include "mpunet/core/rng.hpp"
#include "mpunet/evalstats.hpp"

using namespace mpunet;

namespace {

/// Two-sided t tail by composite Simpson integration of the density.
double t_tail_simpson(double t, double df)
{
    const double c = std::exp(std::lgamma(0.5 * (df + 1)) - std::lgamma(0.5 * df)) / std::sqrt(df * std::numbers::pi);
    auto pdf = [&](double x) { return c * std::pow(1.0 + x * x / df, -0.5 * (df + 1)); };
    const int n = 200000;
    const double hi = std::abs(t), h = hi / n;
    double s = pdf(0) + pdf(hi);
    for (int i = 1; i < n; ++i) s += (i % 2 ? 4.0 : 2.0) * pdf(i * h);
    return 1.0 - 2.0 * s * h / 3.0;
}

std::vector<double> random_scores(Rng& rng, std::size_t n, int levels = 0)
{
    std::vector<double> v(n);
    for (auto& x : v) x = levels > 0 ? static_cast<double>(uniform_index(rng, levels)) / levels : uniform01(rng);
    return v;
}

/// Permutation oracle: every assignment of the pooled values to group a.
double rank_sum_brute(const std::vector<double>& a, const std::vector<double>& b)
{
    std::vector<double> pooled(a);
    pooled.insert(pooled.end(), b.begin(), b.end());
    const auto r = mid_ranks(pooled);
    const std::size_t n = pooled.size(), na = a.size();
    double obs = 0.0;
    for (std::size_t i = 0; i < na; ++i) obs += r[i];
    const double centre = na * (n + 1) / 2.0;
    std::size_t hit = 0, total = 0;
    for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
        if (static_cast<std::size_t>(std::popcount(mask)) != na) continue;
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            if (mask & (1u << i)) s += r[i];
        ++total;
        hit += std::abs(s - centre) >= std::abs(obs - centre) - 1e-9;
    }
    return static_cast<double>(hit) / total;
}

/// Sign-flip oracle for the signed-rank statistic.
double signed_rank_brute(const std::vector<double>& a, const std::vector<double>& b)
{
    std::vector<double> absd;
    std::vector<bool> pos;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) {
            absd.push_back(std::abs(a[i] - b[i]));
            pos.push_back(a[i] > b[i]);
        }
    if (absd.empty()) return 1.0;
    const auto r = mid_ranks(absd);
    double obs = 0.0, total_rank = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i) {
        total_rank += r[i];
        if (pos[i]) obs += r[i];
    }
    const double centre = total_rank / 2;
    std::size_t hit = 0;
    const std::uint32_t count = 1u << r.size();
    for (std::uint32_t mask = 0; mask < count; ++mask) {
        double s = 0.0;
        for (std::size_t i = 0; i < r.size(); ++i)
            if (mask & (1u << i)) s += r[i];
        hit += std::abs(s - centre) >= std::abs(obs - centre) - 1e-9;
    }
    return static_cast<double>(hit) / count;
}

} // namespace

TEST(PairedT, TextbookDifferences)
{
    const std::vector<double> a{1, 2, 3, 4, 5}, b{0, 0, 0, 0, 0};
    const auto r = paired_t_test(a, b);
    EXPECT_NEAR(r.statistic, 3.0 / std::sqrt(0.5), 1e-12);
    EXPECT_NEAR(r.p, 0.0132, 1e-3);
    EXPECT_NEAR(r.p, t_tail_simpson(r.statistic, 4), 1e-10);
    const auto s = paired_t_test(b, a);
    EXPECT_DOUBLE_EQ(s.p, r.p);
    EXPECT_DOUBLE_EQ(s.statistic, -r.statistic);
}

TEST(PairedT, CdfAgreesWithNumericalIntegration)
{
    for (double df : {1.0, 2.0, 3.5, 9.0, 30.0})
        for (double t : {0.0, 0.3, 1.0, 2.2, 5.0}) EXPECT_NEAR(student_t_two_sided(t, df), t_tail_simpson(t, df), 1e-10);
}

TEST(PairedT, DegenerateDifferences)
{
    const std::vector<double> a{0.8, 0.7, 0.9};
    EXPECT_DOUBLE_EQ(paired_t_test(a, a).p, 1.0);
    EXPECT_THROW(paired_t_test(std::vector<double>{1, 2, 3}, std::vector<double>{0, 1, 2}), NumericError);
    EXPECT_THROW(paired_t_test(a, std::vector<double>{0.1, 0.2}), DataError);
    EXPECT_THROW(paired_t_test(std::vector<double>{1.0}, std::vector<double>{2.0}), DataError);
}

TEST(PairedT, PValuesInRange)
{
    Rng rng(1);
    for (int trial = 0; trial < 100; ++trial) {
        const auto a = random_scores(rng, 8), b = random_scores(rng, 8);
        const double p = paired_t_test(a, b).p;
        EXPECT_GE(p, 0.0);
        EXPECT_LE(p, 1.0);
    }
}

TEST(Wilcoxon, SmallestRankSumExample)
{
    const std::vector<double> a{1, 2, 3}, b{4, 5, 6};
    const auto r = wilcoxon_test(a, b);
    EXPECT_TRUE(r.exact);
    EXPECT_DOUBLE_EQ(r.statistic, 6.0);
    EXPECT_NEAR(r.p, 0.1, 1e-12);
    EXPECT_NEAR(wilcoxon_test(b, a).p, 0.1, 1e-12);
}

TEST(Wilcoxon, IdenticalSamples)
{
    const std::vector<double> a{0.5, 0.6, 0.7, 0.8};
    EXPECT_DOUBLE_EQ(wilcoxon_test(a, a).p, 1.0);
    EXPECT_DOUBLE_EQ(wilcoxon_test(a, a, WilcoxonMode::signed_rank).p, 1.0);
    EXPECT_DOUBLE_EQ(wilcoxon_test(a, a, WilcoxonMode::rank_sum, WilcoxonMethod::normal).p, 1.0);
}

TEST(Wilcoxon, ExactRankSumMatchesPermutationOracle)
{
    Rng rng(2);
    for (std::size_t na = 2; na <= 8; ++na)
        for (std::size_t nb = 2; nb <= 8; ++nb)
            for (int levels : {0, 4}) {
                const auto a = random_scores(rng, na, levels), b = random_scores(rng, nb, levels);
                const auto r = wilcoxon_test(a, b, WilcoxonMode::rank_sum, WilcoxonMethod::exact);
                EXPECT_NEAR(r.p, rank_sum_brute(a, b), 1e-12) << na << "x" << nb << " levels " << levels;
            }
}

TEST(Wilcoxon, ExactSignedRankMatchesSignFlipOracle)
{
    Rng rng(3);
    for (std::size_t n = 2; n <= 8; ++n)
        for (int levels : {0, 3}) {
            const auto a = random_scores(rng, n, levels), b = random_scores(rng, n, levels);
            const auto r = wilcoxon_test(a, b, WilcoxonMode::signed_rank, WilcoxonMethod::exact);
            EXPECT_NEAR(r.p, signed_rank_brute(a, b), 1e-12) << n << " levels " << levels;
        }
}

TEST(Wilcoxon, NormalApproximationCloseToExactAtTen)
{
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        auto a = random_scores(rng, 10), b = random_scores(rng, 10);
        for (auto& x : b) x += 0.15;
        for (auto mode : {WilcoxonMode::rank_sum, WilcoxonMode::signed_rank}) {
            const double exact = wilcoxon_test(a, b, mode, WilcoxonMethod::exact).p;
            const double approx = wilcoxon_test(a, b, mode, WilcoxonMethod::normal).p;
            EXPECT_NEAR(exact, approx, 0.02) << "trial " << trial;
        }
    }
}

TEST(Wilcoxon, AutomaticMethodSwitch)
{
    Rng rng(5);
    EXPECT_TRUE(wilcoxon_test(random_scores(rng, 10), random_scores(rng, 10)).exact);
    EXPECT_FALSE(wilcoxon_test(random_scores(rng, 11), random_scores(rng, 10)).exact);
    EXPECT_FALSE(
        wilcoxon_test(random_scores(rng, 12), random_scores(rng, 12), WilcoxonMode::signed_rank).exact);
}

TEST(Wilcoxon, SymmetryAndRange)
{
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        const auto a = random_scores(rng, 5 + trial % 9, 6), b = random_scores(rng, 4 + trial % 7, 6);
        const double p = wilcoxon_test(a, b).p;
        EXPECT_GE(p, 0.0);
        EXPECT_LE(p, 1.0);
        EXPECT_NEAR(p, wilcoxon_test(b, a).p, 1e-12);
    }
    EXPECT_THROW(wilcoxon_test(std::vector<double>{1.0}, std::vector<double>{1.0, 2.0}), DataError);
    EXPECT_THROW(wilcoxon_test(std::vector<double>{1.0, NAN}, std::vector<double>{1.0, 2.0}), DataError);
}

TEST(MidRanks, TiesShareAverage)
{
    const std::vector<double> x{3.0, 1.0, 3.0, 2.0, 3.0};
    EXPECT_EQ(mid_ranks(x), (std::vector<double>{4.0, 1.0, 4.0, 2.0, 4.0}));
}

TEST(BoxStats, HandComputedSummary)
{
    const std::vector<double> x{1, 2, 3, 4, 5};
    const auto b = box_stats(x);
    EXPECT_EQ(b.min, 1);
    EXPECT_EQ(b.max, 5);
    EXPECT_EQ(b.mean, 3);
    EXPECT_EQ(b.median, 3);
    EXPECT_EQ(b.p25, 2);
    EXPECT_EQ(b.p75, 4);
    EXPECT_EQ(b.iqr, 2);
    EXPECT_TRUE(b.outliers.empty());
}

TEST(BoxStats, OutliersAndWhiskers)
{
    const std::vector<double> x{0.91, 0.88, 0.9, 0.89, 0.2, 0.92, 0.87, 0.9};
    const auto b = box_stats(x);
    // sorted: .2 .87 .88 .89 .9 .9 .91 .92 ; h(0.25) = 1.75, h(0.75) = 5.25
    EXPECT_NEAR(b.p25, 0.8775, 1e-12);
    EXPECT_NEAR(b.p75, 0.9025, 1e-12);
    EXPECT_NEAR(b.median, 0.895, 1e-12);
    EXPECT_EQ(b.outliers, (std::vector<double>{0.2}));
    EXPECT_EQ(b.whisker_low, 0.87);
    EXPECT_EQ(b.whisker_high, 0.92);
}

TEST(BoxStats, SingleValueAndPermutation)
{
    const auto s = box_stats(std::vector<double>{0.7});
    for (double v : {s.min, s.max, s.mean, s.p25, s.median, s.p75}) EXPECT_EQ(v, 0.7);
    EXPECT_EQ(s.iqr, 0.0);
    std::vector<double> x{0.3, 0.9, 0.1, 0.5, 0.75, 0.6};
    const auto a = box_stats(x);
    std::reverse(x.begin(), x.end());
    const auto b = box_stats(x);
    EXPECT_EQ(a.p25, b.p25);
    EXPECT_EQ(a.p75, b.p75);
    EXPECT_EQ(a.median, b.median);
    EXPECT_EQ(a.p25, quantile(x, 0.25));
    EXPECT_THROW(box_stats(std::vector<double>{}), DataError);
}
