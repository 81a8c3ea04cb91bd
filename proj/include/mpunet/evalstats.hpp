#ifndef MPUNET_EVALSTATS_HPP
#define MPUNET_EVALSTATS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <boost/math/special_functions/beta.hpp>

#include "mpunet/core/error.hpp"
#include "mpunet/core/quantile.hpp"

namespace mpunet {

struct TestResult {
    double statistic = 0.0;
    double p = 1.0;
    bool exact = false;
};

/// Two-sided p of Student's t with `df` degrees of freedom.
inline double student_t_two_sided(double t, double df)
{
    if (!(df > 0.0)) throw NumericError("t distribution needs positive degrees of freedom");
    if (!std::isfinite(t)) return 0.0;
    return boost::math::ibeta(0.5 * df, 0.5, df / (df + t * t));
}

inline TestResult paired_t_test(std::span<const double> a, std::span<const double> b)
{
    if (a.size() != b.size()) throw DataError("paired t-test needs samples of equal length");
    const std::size_t n = a.size();
    if (n < 2) throw DataError("paired t-test needs at least two pairs");
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
    const double mean = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(n);
    double ss = 0.0;
    for (double x : d) ss += (x - mean) * (x - mean);
    const double var = ss / static_cast<double>(n - 1);
    if (var == 0.0) {
        if (std::all_of(d.begin(), d.end(), [](double x) { return x == 0.0; })) return {0.0, 1.0, true};
        throw NumericError("paired t-test: differences are constant and non-zero");
    }
    const double t = mean / std::sqrt(var / static_cast<double>(n));
    return {t, student_t_two_sided(t, static_cast<double>(n - 1)), false};
}

enum class WilcoxonMode { rank_sum, signed_rank };
enum class WilcoxonMethod { automatic, exact, normal };

/// Mid-ranks (1-based) of `x`; tied values share their average rank.
inline std::vector<double> mid_ranks(std::span<const double> x)
{
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
    std::vector<double> r(x.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
        i = j + 1;
    }
    return r;
}

namespace detail {

inline double normal_two_sided(double dev, double var)
{
    if (!(var > 0.0)) return 1.0;
    const double z = std::max(0.0, std::abs(dev) - 0.5) / std::sqrt(var);
    return std::min(1.0, std::erfc(z / std::sqrt(2.0)));
}

/// Two-sided tail of an integer-valued null distribution given as counts
/// over doubled statistic values: P(|S - centre| >= |obs - centre|).
inline double two_sided_tail(const std::vector<double>& counts, long obs2, long centre2)
{
    const long dev = std::labs(obs2 - centre2);
    double hit = 0.0, total = 0.0;
    for (std::size_t s = 0; s < counts.size(); ++s) {
        total += counts[s];
        if (std::labs(static_cast<long>(s) - centre2) >= dev) hit += counts[s];
    }
    return std::min(1.0, hit / total);
}

inline TestResult rank_sum(std::span<const double> a, std::span<const double> b, WilcoxonMethod method)
{
    const std::size_t na = a.size(), nb = b.size(), n = na + nb;
    std::vector<double> pooled(a.begin(), a.end());
    pooled.insert(pooled.end(), b.begin(), b.end());
    const auto r = mid_ranks(pooled);
    std::vector<long> r2(n); // doubled ranks are integers
    for (std::size_t i = 0; i < n; ++i) r2[i] = std::lround(2.0 * r[i]);
    long w2 = 0;
    for (std::size_t i = 0; i < na; ++i) w2 += r2[i];
    const long centre2 = static_cast<long>(na * (n + 1)); // 2 * na(n+1)/2
    const bool exact = method == WilcoxonMethod::exact || (method == WilcoxonMethod::automatic && na <= 10 && nb <= 10);
    if (exact) {
        const long max_sum = std::accumulate(r2.begin(), r2.end(), 0L);
        // counts[k][s]: subsets of size k with doubled rank sum s
        std::vector<std::vector<double>> counts(na + 1, std::vector<double>(static_cast<std::size_t>(max_sum) + 1, 0.0));
        counts[0][0] = 1.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = std::min(na, i + 1); k >= 1; --k)
                for (long s = max_sum; s >= r2[i]; --s) counts[k][s] += counts[k - 1][s - r2[i]];
        return {0.5 * static_cast<double>(w2), two_sided_tail(counts[na], w2, centre2), true};
    }
    std::vector<double> sorted = pooled;
    std::sort(sorted.begin(), sorted.end());
    double ties = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && sorted[j + 1] == sorted[i]) ++j;
        const double t = static_cast<double>(j - i + 1);
        ties += t * t * t - t;
        i = j + 1;
    }
    const double dn = static_cast<double>(n);
    const double var = static_cast<double>(na) * static_cast<double>(nb) / 12.0 * ((dn + 1.0) - ties / (dn * (dn - 1.0)));
    return {0.5 * static_cast<double>(w2), normal_two_sided(0.5 * static_cast<double>(w2 - centre2), var), false};
}

inline TestResult signed_rank(std::span<const double> a, std::span<const double> b, WilcoxonMethod method)
{
    if (a.size() != b.size()) throw DataError("signed-rank test needs samples of equal length");
    std::vector<double> absd;
    std::vector<bool> positive;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        if (d == 0.0) continue;
        absd.push_back(std::abs(d));
        positive.push_back(d > 0.0);
    }
    if (absd.empty()) return {0.0, 1.0, true};
    const auto r = mid_ranks(absd);
    const std::size_t n = absd.size();
    std::vector<long> r2(n);
    long w2 = 0, total2 = 0;
    for (std::size_t i = 0; i < n; ++i) {
        r2[i] = std::lround(2.0 * r[i]);
        total2 += r2[i];
        if (positive[i]) w2 += r2[i];
    }
    // centre is total/2 in rank units; work in quadrupled units to stay integral
    const bool exact = method == WilcoxonMethod::exact || (method == WilcoxonMethod::automatic && n <= 10);
    if (exact) {
        std::vector<double> counts(static_cast<std::size_t>(total2) + 1, 0.0);
        counts[0] = 1.0;
        for (std::size_t i = 0; i < n; ++i)
            for (long s = total2; s >= r2[i]; --s) counts[s] += counts[s - r2[i]];
        const long dev4 = std::labs(2 * w2 - total2);
        double hit = 0.0, all = 0.0;
        for (long s = 0; s <= total2; ++s) {
            all += counts[s];
            if (std::labs(2 * s - total2) >= dev4) hit += counts[s];
        }
        return {0.5 * static_cast<double>(w2), std::min(1.0, hit / all), true};
    }
    double var = 0.0;
    for (double x : r) var += x * x;
    var /= 4.0;
    return {0.5 * static_cast<double>(w2), normal_two_sided(0.5 * static_cast<double>(w2) - 0.25 * static_cast<double>(total2), var),
            false};
}

} // namespace detail

/// rank_sum: independent samples (Mann-Whitney form, statistic = rank sum
/// of `a`). signed_rank: paired differences, zero differences dropped.
/// Exact null distributions up to 10 observations per group, otherwise a
/// tie-corrected normal approximation with continuity correction.
inline TestResult wilcoxon_test(std::span<const double> a, std::span<const double> b,
                                WilcoxonMode mode = WilcoxonMode::rank_sum,
                                WilcoxonMethod method = WilcoxonMethod::automatic)
{
    if (a.size() < 2 || b.size() < 2) throw DataError("Wilcoxon test needs at least two observations per sample");
    for (auto s : {a, b})
        for (double x : s)
            if (!std::isfinite(x)) throw DataError("Wilcoxon test input contains non-finite values");
    return mode == WilcoxonMode::rank_sum ? detail::rank_sum(a, b, method) : detail::signed_rank(a, b, method);
}

struct BoxStats {
    double min = 0.0;
    double max = 0.0;
    double mean = 0.0;
    double p25 = 0.0;
    double median = 0.0;
    double p75 = 0.0;
    double iqr = 0.0;
    double whisker_low = 0.0;
    double whisker_high = 0.0;
    std::vector<double> outliers; // ascending
};

inline BoxStats box_stats(std::span<const double> values)
{
    if (values.empty()) throw DataError("box statistics of an empty sample");
    std::vector<double> s(values.begin(), values.end());
    std::sort(s.begin(), s.end());
    BoxStats b;
    b.min = s.front();
    b.max = s.back();
    b.mean = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
    b.p25 = quantile_sorted(s, 0.25);
    b.median = quantile_sorted(s, 0.5);
    b.p75 = quantile_sorted(s, 0.75);
    b.iqr = b.p75 - b.p25;
    const double lo = b.p25 - 1.5 * b.iqr, hi = b.p75 + 1.5 * b.iqr;
    b.whisker_low = b.max;
    b.whisker_high = b.min;
    for (double x : s) {
        if (x < lo || x > hi) {
            b.outliers.push_back(x);
            continue;
        }
        b.whisker_low = std::min(b.whisker_low, x);
        b.whisker_high = std::max(b.whisker_high, x);
    }
    return b;
}

} // namespace mpunet

#endif // MPUNET_EVALSTATS_HPP
