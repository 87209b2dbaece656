#ifndef GLORENZ_STATS_HPP
#define GLORENZ_STATS_HPP

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <boost/math/statistics/bivariate_statistics.hpp>
#include <boost/math/statistics/linear_regression.hpp>

#include "core.hpp"

namespace glorenz {

struct LinearFit {
    double intercept = 0.0;
    double slope = 0.0;
    double r2 = 0.0;
    std::size_t points = 0;
};

inline LinearFit linear_fit(const std::vector<double>& x, const std::vector<double>& y)
{
    if (x.size() != y.size() || x.size() < 2)
        throw FitUnreliable("linear fit needs at least two points");
    auto [c0, c1, r2] = boost::math::statistics::simple_ordinary_least_squares_with_R_squared(x, y);
    return {c0, c1, r2, x.size()};
}

// Average ranks for ties.
inline std::vector<double> ranks(const std::vector<double>& v)
{
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]])
            ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k)
            r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b)
{
    auto ra = ranks(a), rb = ranks(b);
    const bool flat_a = std::adjacent_find(ra.begin(), ra.end(), std::not_equal_to<>()) == ra.end();
    const bool flat_b = std::adjacent_find(rb.begin(), rb.end(), std::not_equal_to<>()) == rb.end();
    if (flat_a || flat_b)
        return 0.0;
    return boost::math::statistics::correlation_coefficient(ra, rb);
}

// Kolmogorov-Smirnov distance of a sample in [0,1] from the uniform law.
inline double ks_uniform(std::vector<double> u)
{
    std::sort(u.begin(), u.end());
    const double n = static_cast<double>(u.size());
    double d = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        d = std::max(d, static_cast<double>(i + 1) / n - u[i]);
        d = std::max(d, u[i] - static_cast<double>(i) / n);
    }
    return d;
}

// Delete-one-group jackknife for an estimator computed from group sums.
// `estimate(excluded)` returns the statistic with group `excluded` removed
// (excluded == groups means use everything).
template <class Est>
double jackknife_stderr(std::size_t groups, Est&& estimate)
{
    if (groups < 2)
        return 0.0;
    std::vector<double> loo(groups);
    double mean = 0.0;
    for (std::size_t g = 0; g < groups; ++g) {
        loo[g] = estimate(g);
        mean += loo[g];
    }
    mean /= static_cast<double>(groups);
    double ss = 0.0;
    for (double v : loo)
        ss += (v - mean) * (v - mean);
    const double G = static_cast<double>(groups);
    return std::sqrt((G - 1.0) / G * ss);
}

}  // namespace glorenz

#endif
