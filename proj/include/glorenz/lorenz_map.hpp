#ifndef GLORENZ_LORENZ_MAP_HPP
#define GLORENZ_LORENZ_MAP_HPP

#include <algorithm>
#include <cmath>
#include <concepts>
#include <string>
#include <utility>
#include <vector>

#include "core.hpp"

namespace glorenz {

// A two-branch, piecewise increasing interval map with one singular point c.
// Branch 0 lives on (domain.lo, c), branch 1 on (c, domain.hi). Branch
// formulas extend to the closed branch interval so lateral limits come for free.
template <class M>
concept IntervalMap = requires(const M& m, int b, long double z, double x) {
    { m.domain() } -> std::convertible_to<Interval>;
    { m.split_point() } -> std::convertible_to<double>;
    { m.branch_eval(b, z) } -> std::convertible_to<long double>;
    { m.branch_eval_d(b, x) } -> std::convertible_to<double>;
    { m.branch_inverse(b, z) } -> std::convertible_to<long double>;
    { m.branch_deriv(b, x) } -> std::convertible_to<double>;
    { m.branch_deriv2(b, x) } -> std::convertible_to<double>;
};

// One branch step returning (value, derivative); fused when the map offers it.
template <IntervalMap M>
std::pair<double, double> branch_step(const M& m, int b, double x)
{
    if constexpr (requires { m.branch_eval_deriv(b, x); })
        return m.branch_eval_deriv(b, x);
    else
        return {m.branch_eval_d(b, x), m.branch_deriv(b, x)};
}

template <IntervalMap M>
double branch_inverse_fast(const M& m, int b, double y)
{
    if constexpr (requires { m.branch_inverse_d(b, y); })
        return m.branch_inverse_d(b, y);
    else
        return static_cast<double>(m.branch_inverse(b, y));
}

template <IntervalMap M>
double inverse_increment(const M& m, int b, double z, double hz, double dz)
{
    if constexpr (requires { m.branch_inverse_step(b, z, hz, dz); })
        return m.branch_inverse_step(b, z, hz, dz);
    else
        return static_cast<double>(m.branch_inverse(b, static_cast<long double>(z) + dz) - m.branch_inverse(b, z));
}

template <IntervalMap M>
Interval branch_domain(const M& m, int b)
{
    const Interval d = m.domain();
    return b == 0 ? Interval{d.lo, m.split_point()} : Interval{m.split_point(), d.hi};
}

template <IntervalMap M>
int branch_of(const M& m, double x)
{
    const double c = m.split_point();
    if (x == c)
        throw SingularPoint("point sits on the singular point " + fmt17(c));
    return x < c ? 0 : 1;
}

template <IntervalMap M>
double map_eval(const M& m, double x)
{
    return m.branch_eval_d(branch_of(m, x), x);
}

template <IntervalMap M>
double map_deriv(const M& m, double x)
{
    return m.branch_deriv(branch_of(m, x), x);
}

template <IntervalMap M>
double map_deriv2(const M& m, double x)
{
    return m.branch_deriv2(branch_of(m, x), x);
}

template <IntervalMap M>
Interval branch_image(const M& m, int b)
{
    const Interval d = branch_domain(m, b);
    return {static_cast<double>(m.branch_eval(b, d.lo)), static_cast<double>(m.branch_eval(b, d.hi))};
}

struct LorenzMap1D {
    double alpha = 0.8;
    double a = 1.64;
    double b_left = 0.5;    // f(0-)
    double b_right = -0.5;  // f(0+)

    Interval domain() const { return {-0.5, 0.5}; }
    double split_point() const { return 0.0; }

    // Lower end of the admissible slope window; Df exceeds sqrt 2 iff a is above it.
    static double slope_window_lo(double alpha) { return std::pow(2.0, alpha - 0.5) / alpha; }
    static double slope_window_hi(double alpha) { return std::pow(2.0, alpha); }

    std::vector<std::string> violations() const
    {
        std::vector<std::string> v;
        if (!(alpha > 1.0 / kSqrt2 && alpha < 1.0))
            v.push_back("exponent alpha must lie in (1/sqrt2, 1), got " + fmt17(alpha));
        const double lo = slope_window_lo(alpha), hi = slope_window_hi(alpha);
        if (!(a > lo && a <= hi))
            v.push_back("slope window 2^(alpha-1/2)/alpha < a <= 2^alpha violated: need " + fmt17(lo) + " < a <= " +
                        fmt17(hi) + ", got a = " + fmt17(a));
        if (!(b_left > 0.0 && b_left <= 0.5) || !(b_right < 0.0 && b_right >= -0.5))
            v.push_back("branch offsets need 0 < b_left <= 1/2 and -1/2 <= b_right < 0");
        else if (a * std::pow(0.5, alpha) + b_right > 0.5 || b_left - a * std::pow(0.5, alpha) < -0.5)
            v.push_back("branch images leave I = [-1/2, 1/2]");
        return v;
    }

    void validate() const
    {
        auto v = violations();
        if (!v.empty()) {
            std::string msg = "invalid Lorenz map:";
            for (auto& s : v)
                msg += "\n  - " + s;
            throw ValidationError(msg);
        }
    }

    // exp/log instead of powl: same accuracy here, several times faster
    long double branch_eval(int b, long double x) const
    {
        const long double ax = std::fabs(x);
        const long double p = ax == 0.0L ? 0.0L : std::exp(static_cast<long double>(alpha) * std::log(ax)) * a;
        return b == 0 ? b_left - p : p + b_right;
    }
    double branch_eval_d(int b, double x) const
    {
        const double p = a * std::pow(std::fabs(x), alpha);
        return b == 0 ? b_left - p : p + b_right;
    }
    long double branch_inverse(int b, long double y) const
    {
        const long double u = b == 0 ? (b_left - y) / a : (y - b_right) / a;
        const long double r = u <= 0.0L ? 0.0L : std::exp(std::log(u) / static_cast<long double>(alpha));
        return b == 0 ? -r : r;
    }
    // value and derivative with a single pow
    std::pair<double, double> branch_eval_deriv(int b, double x) const
    {
        const double ax = std::fabs(x), p = a * std::pow(ax, alpha);
        return {b == 0 ? b_left - p : p + b_right, alpha * p / ax};
    }
    // h(z + dz) - h(z) for the inverse branch h, given hz = h(z); stable for tiny dz
    double branch_inverse_step(int b, double z, double hz, double dz) const
    {
        const double gap = b == 0 ? b_left - z : z - b_right;
        if (gap <= 0.0)
            return (b == 0 ? -1.0 : 1.0) * std::pow(std::abs(dz) / a, 1.0 / alpha);
        const double s = b == 0 ? -dz / gap : dz / gap;
        const double r = std::abs(hz) * std::expm1(std::log1p(s) / alpha);
        return b == 0 ? -r : r;
    }
    double branch_inverse_d(int b, double y) const
    {
        const double u = b == 0 ? (b_left - y) / a : (y - b_right) / a;
        const double r = u <= 0.0 ? 0.0 : std::pow(u, 1.0 / alpha);
        return b == 0 ? -r : r;
    }
    double branch_deriv(int, double x) const { return a * alpha * std::pow(std::fabs(x), alpha - 1.0); }
    double branch_deriv2(int b, double x) const
    {
        const double v = a * alpha * (alpha - 1.0) * std::pow(std::fabs(x), alpha - 2.0);
        return b == 0 ? -v : v;
    }
};

template <IntervalMap M>
long double bisect_inverse(const M& m, int b, long double y, long double tol = 1e-12L)
{
    Interval d = branch_domain(m, b);
    long double lo = d.lo, hi = d.hi;
    while (hi - lo > tol) {
        const long double mid = 0.5L * (lo + hi);
        (m.branch_eval(b, mid) < y ? lo : hi) = mid;
    }
    return 0.5L * (lo + hi);
}

struct PreimageSet {
    std::vector<double> points;  // sorted
    double max_gap = 0.0;        // over points together with the ends of I
};

// All x with f^i(x) = target for some 1 <= i <= depth, by bisection per branch.
template <IntervalMap M>
PreimageSet preimage_set(const M& m, double target, int depth)
{
    require(depth >= 1, "preimage depth must be >= 1");
    std::vector<long double> frontier{target};
    std::vector<double> all;
    for (int i = 1; i <= depth; ++i) {
        std::vector<long double> next;
        for (long double y : frontier)
            for (int b = 0; b < 2; ++b) {
                const Interval im = branch_image(m, b);
                if (y > std::min(im.lo, im.hi) && y < std::max(im.lo, im.hi))
                    next.push_back(bisect_inverse(m, b, y));
            }
        for (long double x : next)
            all.push_back(static_cast<double>(x));
        frontier.swap(next);
    }
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());
    PreimageSet out;
    out.points = all;
    const Interval d = m.domain();
    double prev = d.lo;
    for (double p : all) {
        out.max_gap = std::max(out.max_gap, p - prev);
        prev = p;
    }
    out.max_gap = std::max(out.max_gap, d.hi - prev);
    return out;
}

enum class Side { left, right };

struct LeoWitness {
    int n = 0;
    Side side = Side::left;
    Interval piece;            // subinterval of J on which f^n is monotone
    Interval image;            // f^n(piece)
    std::vector<int> branches; // branch used at each step
};

// Track the larger piece at every split; stop once the image covers a whole
// side (c, hi) or (lo, c) of the domain.
template <IntervalMap M>
LeoWitness leo_witness(const M& m, Interval J, int cap = 200)
{
    const Interval d = m.domain();
    const double c = m.split_point();
    require(J.lo < J.hi && J.lo >= d.lo && J.hi <= d.hi, "leo_witness needs a nonempty J inside the domain");
    long double lo = J.lo, hi = J.hi;
    LeoWitness w;
    for (int n = 1; n <= cap; ++n) {
        int b;
        if (lo < c && c < hi)
            b = (c - lo >= hi - c) ? 0 : 1;
        else
            b = hi <= c ? 0 : 1;
        if (b == 0)
            hi = std::min<long double>(hi, c);
        else
            lo = std::max<long double>(lo, c);
        w.branches.push_back(b);
        lo = m.branch_eval(b, lo);
        hi = m.branch_eval(b, hi);
        const bool right = lo <= c && hi >= d.hi;
        const bool left = lo <= d.lo && hi >= c;
        if (left || right) {
            w.n = n;
            w.side = left ? Side::left : Side::right;
            w.image = {static_cast<double>(lo), static_cast<double>(hi)};
            long double pl = lo, ph = hi;
            for (int k = n - 1; k >= 0; --k) {
                pl = m.branch_inverse(w.branches[k], pl);
                ph = m.branch_inverse(w.branches[k], ph);
            }
            w.piece = {static_cast<double>(pl), static_cast<double>(ph)};
            return w;
        }
    }
    throw IterationBudgetExceeded("no side covered after " + std::to_string(cap) + " iterates");
}

}  // namespace glorenz

#endif
