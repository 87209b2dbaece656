#ifndef GLORENZ_SUSPENSION_HPP
#define GLORENZ_SUSPENSION_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "core.hpp"
#include "flow.hpp"
#include "parallel.hpp"
#include "partition.hpp"
#include "rng.hpp"
#include "roof.hpp"
#include "stats.hpp"
#include "transfer.hpp"

namespace glorenz {

// Point of the section over the base: leaf x, coordinate t along the leaf.
struct SkewState {
    double x = 0.0;
    double t = 0.0;
};

// The leaf coordinate after one return is affine in the old one: t' = slope t + offset.
struct FiberAffine {
    double slope = 1.0;
    double offset = 0.0;
};

inline FiberAffine fiber_step(const FlowParams& p, double x)
{
    if (x == 0.0)
        throw SingularLeaf("no return from the singular leaf");
    const double c = FlowParams::fiber_slope, ax = std::abs(x);
    const double e1 = std::pow(ax, p.beta()), e2 = std::pow(ax, p.alpha());
    if (x > 0)
        return {c * p.rotation_right * e1, c * e2 - c};
    return {c * p.rotation_left * e1, c - c * e2};
}

// Composite fiber map of one induced step from x in cell c, and where x lands.
struct CellFiber {
    double fx = 0.0;
    FiberAffine fiber;
    double log_abs_slope = 0.0;  // slope underflows for long itineraries
    double log_dF = 0.0;
};

inline CellFiber cell_fiber(const FlowParams& p, const Cell& c, double x)
{
    const LorenzMap1D m = p.lorenz_map();
    CellFiber out;
    double sign = 1.0;
    for (int i = 0; i < c.R; ++i) {
        const FiberAffine a = fiber_step(p, x);
        out.fiber.offset = a.slope * out.fiber.offset + a.offset;
        out.log_abs_slope += std::log(std::abs(a.slope));
        sign *= sgn(a.slope);
        const auto [fx, dfx] = branch_step(m, c.branch(i), x);
        out.log_dF += std::log(dfx);
        x = fx;
    }
    out.fx = x;
    out.fiber.slope = sign * std::exp(out.log_abs_slope);
    return out;
}

// One return of the induced map: the 2D return map applied R times.
inline SkewState skew_step(const FlowParams& flow, const Cell& c, SkewState w)
{
    SectionPoint s{w.x, w.t};
    for (int i = 0; i < c.R; ++i)
        s = poincare_map(flow, s);
    return {s.x, s.y};
}

inline SkewState skew_step(const MarkovPartition& part, const FlowParams& flow, SkewState w)
{
    const long i = part.find(w.x);
    if (i < 0)
        throw UnresolvedPoint("skew step from unresolved leaf x = " + fmt17(w.x));
    return skew_step(flow, part.cells[static_cast<std::size_t>(i)], w);
}

// max |pi(F^n w) - F^n(pi w)| over random resolved points (lost orbits are skipped).
struct SemiconjugacyCheck {
    double max_error = 0.0;
    std::size_t points = 0;
    std::size_t skipped = 0;
};

inline SemiconjugacyCheck semiconjugacy_check(const MarkovPartition& part, const FlowParams& flow, std::size_t points,
                                              int steps, std::uint64_t seed)
{
    const LorenzMap1D m = flow.lorenz_map();
    SemiconjugacyCheck r;
    Rng rng(seed);
    while (r.points < points) {
        SkewState w{rng.uniform(part.delta.lo, part.delta.hi), rng.uniform(-0.5, 0.5)};
        double x = w.x;
        bool ok = true;
        for (int k = 0; k < steps && ok; ++k) {
            const long i = part.find(w.x);
            if (i < 0) {
                ok = false;
                break;
            }
            const Cell& c = part.cells[static_cast<std::size_t>(i)];
            w = skew_step(flow, c, w);
            x = induced_eval(m, c, x);
            r.max_error = std::max(r.max_error, std::abs(w.x - x));
        }
        if (ok)
            ++r.points;
        else
            ++r.skipped;
        if (r.skipped > 100 * points + 1000)
            throw UnresolvedMassTooLarge("semiconjugacy check keeps leaving the certified cells");
    }
    return r;
}

// Two states on one leaf, one induced step: |t1' - t2'| / |t1 - t2|. The
// measured ratio uses the two images; `max_slope` is the exact composite slope.
struct LeafContraction {
    double max_ratio = 0.0;
    double max_slope = 0.0;
    double mean_log_slope = 0.0;
    double per_return_bound = 0.0;  // fiber_slope * 2^-beta, one pass around the loop
    std::size_t pairs = 0;
};

inline LeafContraction measure_leaf_contraction(const MarkovPartition& part, const FlowParams& flow, std::size_t pairs,
                                                std::uint64_t seed)
{
    LeafContraction r;
    r.per_return_bound = FlowParams::fiber_slope * std::pow(2.0, -flow.beta());
    Rng rng(seed);
    std::size_t tries = 0;
    while (r.pairs < pairs) {
        if (++tries > 100 * pairs + 1000)
            throw UnresolvedMassTooLarge("leaf contraction sampling keeps missing certified cells");
        const double x = rng.uniform(part.delta.lo, part.delta.hi);
        const long i = part.find(x);
        if (i < 0)
            continue;
        const Cell& c = part.cells[static_cast<std::size_t>(i)];
        const double t1 = rng.uniform(-0.5, 0.5), t2 = rng.uniform(-0.5, 0.5);
        if (t1 == t2)
            continue;
        const SkewState a = skew_step(flow, c, {x, t1}), b = skew_step(flow, c, {x, t2});
        r.max_ratio = std::max(r.max_ratio, std::abs(a.t - b.t) / std::abs(t1 - t2));
        const CellFiber cf = cell_fiber(flow, c, x);
        r.max_slope = std::max(r.max_slope, std::abs(cf.fiber.slope));
        r.mean_log_slope += cf.log_abs_slope;
        ++r.pairs;
    }
    r.mean_log_slope /= static_cast<double>(r.pairs);
    return r;
}

// ---- suspension semiflow ------------------------------------------------------

struct SuspensionPoint {
    SkewState w;
    double s = 0.0;  // height under the roof
};

// Y_t(w, s) = (w, s + t) with (w, r(w)) identified with (F w, 0).
inline SuspensionPoint semiflow_evolve(const MarkovPartition& part, const FlowParams& flow, const RoofFunction& rf,
                                       SuspensionPoint p, double t)
{
    require(t >= 0.0, "semiflow time must be non-negative");
    const LorenzMap1D m = flow.lorenz_map();
    double left = t;
    for (;;) {
        const long i = part.find(p.w.x);
        if (i < 0)
            throw UnresolvedPoint("semiflow reached unresolved leaf x = " + fmt17(p.w.x));
        const Cell& c = part.cells[static_cast<std::size_t>(i)];
        const double r = eval_roof(rf, m, c, p.w.x);
        // within a few ulps of the roof counts as arriving, so t = r - s lands on (F w, 0)
        if (p.s + left < r - 4.0 * std::numeric_limits<double>::epsilon() * r) {
            p.s += left;
            return p;
        }
        left = std::max(0.0, left - (r - p.s));
        p.w = skew_step(flow, c, p.w);
        p.s = 0.0;
    }
}

// ---- physical measure --------------------------------------------------------

struct PhysicalSample {
    SuspensionPoint p;
    double weight = 1.0;  // the roof at the base point
    std::uint64_t path = 0;
};

struct PhysicalSamples {
    std::vector<PhysicalSample> points;
    std::size_t requested = 0;
    std::size_t discarded = 0;  // paths that met an unresolved leaf
};

// Inverse CDF of a piecewise-constant density.
inline double sample_grid_density(const GridDensity& phi, const std::vector<double>& cum, double u)
{
    const double target = u * cum.back();
    auto it = std::upper_bound(cum.begin() + 1, cum.end(), target);
    const auto k = static_cast<std::size_t>(std::min<long>(it - cum.begin() - 1, static_cast<long>(phi.bins()) - 1));
    const double inside = phi.values[k] > 0.0 ? (target - cum[k]) / (cum[k + 1] - cum[k]) : 0.5;
    return phi.edge(k) + std::clamp(inside, 0.0, 1.0) * phi.width();
}

// Base from phi, leaf coordinate from Lebesgue pushed `burn_in` returns
// forward, height uniform under the roof, weight r.
inline PhysicalSamples sample_physical_measure(const MarkovPartition& part, const FlowParams& flow, const RoofFunction& rf,
                                               const GridDensity& phi, std::size_t n_samples, int burn_in,
                                               std::uint64_t seed, const Parallel& par = {})
{
    require(n_samples >= 1, "need at least one sample");
    require(burn_in >= 0, "burn-in must be non-negative");
    const LorenzMap1D m = flow.lorenz_map();
    std::vector<double> cum(phi.bins() + 1, 0.0);
    for (std::size_t k = 0; k < phi.bins(); ++k)
        cum[k + 1] = cum[k] + std::max(0.0, phi.values[k]);
    require(cum.back() > 0.0, "sampling density has no mass");

    const std::size_t block = 4096;
    std::vector<std::vector<PhysicalSample>> out((n_samples + block - 1) / block);
    par.blocks(n_samples, block, [&](std::size_t b, std::size_t lo, std::size_t hi) {
        auto& v = out[b];
        v.reserve(hi - lo);
        for (std::size_t i = lo; i < hi; ++i) {
            Rng rng(derive_seed(seed, i));
            SkewState w{sample_grid_density(phi, cum, rng.uniform()), rng.uniform(-0.5, 0.5)};
            const double u = rng.uniform();
            try {
                for (int k = 0; k < burn_in; ++k)
                    w = skew_step(part, flow, w);
                const long ci = part.find(w.x);
                if (ci < 0)
                    continue;
                const double r = eval_roof(rf, m, part.cells[static_cast<std::size_t>(ci)], w.x);
                v.push_back({{w, u * r}, r, i});
            } catch (const UnresolvedPoint&) {
            }
        }
    });
    PhysicalSamples s;
    s.requested = n_samples;
    for (auto& v : out)
        s.points.insert(s.points.end(), v.begin(), v.end());
    s.discarded = n_samples - s.points.size();
    return s;
}

// ---- observables ---------------------------------------------------------------

// (1 - u^2)^3 on |u| < 1: C^2, peak 1, max slope 96 / (25 sqrt 5).
struct Bump {
    bool on = false;
    double center = 0.0;
    double width = 1.0;

    static constexpr double kMaxSlope = 96.0 / (25.0 * 2.23606797749978969641);

    double value(double v) const
    {
        if (!on)
            return 1.0;
        const double u = (v - center) / width;
        return std::abs(u) < 1.0 ? std::pow(1.0 - u * u, 3) : 0.0;
    }
    double deriv(double v) const
    {
        if (!on)
            return 0.0;
        const double u = (v - center) / width;
        return std::abs(u) < 1.0 ? -6.0 * u * (1.0 - u * u) * (1.0 - u * u) / width : 0.0;
    }
    double sup_deriv() const { return on ? kMaxSlope / width : 0.0; }
};

// Product of bumps in (x, y, s). C^1 norm taken as sup|u| + sum of sup|partial u|.
struct Observable {
    std::string name;
    double amplitude = 1.0;
    Bump bx, by, bs;

    double operator()(double x, double y, double s) const
    {
        return amplitude * bx.value(x) * by.value(y) * bs.value(s);
    }
    double operator()(const SuspensionPoint& p) const { return (*this)(p.w.x, p.w.t, p.s); }
    double d_dx(double x, double y, double s) const { return amplitude * bx.deriv(x) * by.value(y) * bs.value(s); }
    double d_dy(double x, double y, double s) const { return amplitude * bx.value(x) * by.deriv(y) * bs.value(s); }
    double c0_norm() const { return std::abs(amplitude); }
    double c1_norm() const { return std::abs(amplitude) * (1.0 + bx.sup_deriv() + by.sup_deriv() + bs.sup_deriv()); }
    bool leaf_constant() const { return !by.on && !bs.on; }
    bool height_free() const { return !bs.on; }
};

// Leaf coordinates after a return sit near -0.17 (right branch) and +0.17 (left).
// Height bumps span twice the shortest roof (~5.1); xs_narrow does not, and its
// correlation is pinned at E phi E psi until the first return.
inline std::vector<Observable> observable_library()
{
    auto b = [](double c, double w) { return Bump{true, c, w}; };
    return {
        {"one", 1.0, {}, {}, {}},
        {"x_bump", 1.0, b(0.0, 0.15), {}, {}},
        {"y_bump", 1.0, {}, b(-0.17, 0.06), {}},
        {"xy_bump", 1.0, b(0.03, 0.1), b(0.17, 0.06), {}},
        {"s_bump", 1.0, {}, {}, b(10.0, 10.0)},
        {"xs_bump", 1.0, b(0.0, 0.12), {}, b(10.0, 10.0)},
        {"xys_bump", 1.0, b(0.0, 0.12), b(-0.17, 0.08), b(10.0, 10.0)},
        {"xs_narrow", 1.0, b(-0.02, 0.1), {}, b(1.0, 0.8)},
    };
}

// The pairs used for the decay-of-correlations gate.
inline std::vector<std::pair<std::string, std::string>> decay_pairs()
{
    return {{"xs_bump", "xs_bump"}, {"xys_bump", "xys_bump"}, {"xs_bump", "xys_bump"}};
}

inline Observable find_observable(const std::string& name)
{
    for (auto& o : observable_library())
        if (o.name == name)
            return o;
    throw PreconditionError("unknown observable '" + name + "'");
}

// ---- correlations --------------------------------------------------------------

struct CorrelationSeries {
    std::string phi_name, psi_name;
    double norm_product = 0.0;  // ||phi||_C1 ||psi||_C1
    std::vector<double> t, c_hat, std_err;
    bool signal = false;        // false: no window cleared 3 stderr
    double window_lo = 0.0, window_hi = 0.0;
    LinearFit fit;              // log C_hat against t on the window
    double delta_hat = 0.0;     // -slope
    std::size_t samples = 0, discarded = 0, groups = 0;
    std::string note;
};

struct ObservablePair {
    Observable phi, psi;
};

namespace detail {

struct GroupSums {
    double w = 0.0, f = 0.0, g = 0.0, fg = 0.0;
    GroupSums& operator+=(const GroupSums& o)
    {
        w += o.w, f += o.f, g += o.g, fg += o.fg;
        return *this;
    }
    GroupSums operator-(const GroupSums& o) const { return {w - o.w, f - o.f, g - o.g, fg - o.fg}; }
    double cov() const { return std::abs(fg / w - (f / w) * (g / w)); }
};

// Largest window [t0, t0 + 2^k] with every point above 3 stderr.
inline void fit_window(CorrelationSeries& s, std::size_t min_points)
{
    const double t0 = s.t.front(), span = s.t.back() - t0;
    if (span > 0.0)
        for (double len = std::exp2(std::floor(std::log2(span))); ; len *= 0.5) {
            std::vector<double> x, y;
            bool clear = true;
            for (std::size_t k = 0; k < s.t.size() && s.t[k] <= t0 + len * (1.0 + 1e-12); ++k) {
                if (!(s.c_hat[k] > 3.0 * s.std_err[k])) {
                    clear = false;
                    break;
                }
                x.push_back(s.t[k]);
                y.push_back(std::log(s.c_hat[k]));
            }
            if (x.size() < min_points)
                break;
            if (!clear)
                continue;
            s.signal = true;
            s.window_lo = t0;
            s.window_hi = x.back();
            s.fit = linear_fit(x, y);
            s.delta_hat = -s.fit.slope;
            return;
        }
    s.note = "SignalBelowNoise: no dyadic window with every C_hat above 3 stderr";
}

}  // namespace detail

// C_t = |E[phi psi o Y_t] - E[phi] E[psi o Y_t]| under the r-weighted samples.
// Every pair and every t uses the same sample paths; a path that meets an
// unresolved leaf at any t is dropped for all of them.
inline std::vector<CorrelationSeries> correlation_series(const PhysicalSamples& samples, const MarkovPartition& part,
                                                         const FlowParams& flow, const RoofFunction& rf,
                                                         const std::vector<ObservablePair>& pairs,
                                                         const std::vector<double>& t_grid, std::size_t groups = 64,
                                                         std::size_t min_fit_points = 4, const Parallel& par = {})
{
    require(!t_grid.empty() && t_grid.front() >= 0.0, "time grid must start at t >= 0");
    require(std::is_sorted(t_grid.begin(), t_grid.end()), "time grid must be increasing");
    require(!pairs.empty(), "need at least one observable pair");
    const std::size_t n = samples.points.size();
    require(n >= groups && groups >= 2, "need at least as many samples as jackknife groups");
    const std::size_t T = t_grid.size(), P = pairs.size();

    // sums[group][pair * T + k]
    std::vector<std::vector<detail::GroupSums>> sums(groups, std::vector<detail::GroupSums>(P * T));
    std::vector<std::size_t> lost(groups, 0);
    const std::size_t per = (n + groups - 1) / groups;
    par.blocks(n, per, [&](std::size_t g, std::size_t lo, std::size_t hi) {
        std::vector<SuspensionPoint> path(T);
        for (std::size_t i = lo; i < hi; ++i) {
            const PhysicalSample& ps = samples.points[i];
            try {
                SuspensionPoint p = ps.p;
                double now = 0.0;
                for (std::size_t k = 0; k < T; ++k) {
                    p = semiflow_evolve(part, flow, rf, p, t_grid[k] - now);
                    now = t_grid[k];
                    path[k] = p;
                }
            } catch (const UnresolvedPoint&) {
                ++lost[g];
                continue;
            }
            for (std::size_t q = 0; q < P; ++q) {
                const double f = pairs[q].phi(ps.p);
                for (std::size_t k = 0; k < T; ++k) {
                    const double v = pairs[q].psi(path[k]);
                    auto& a = sums[g][q * T + k];
                    a.w += ps.weight;
                    a.f += ps.weight * f;
                    a.g += ps.weight * v;
                    a.fg += ps.weight * f * v;
                }
            }
        }
    });

    std::size_t dropped = 0;
    for (auto v : lost)
        dropped += v;
    std::vector<CorrelationSeries> out(P);
    for (std::size_t q = 0; q < P; ++q) {
        auto& s = out[q];
        s.phi_name = pairs[q].phi.name;
        s.psi_name = pairs[q].psi.name;
        s.norm_product = pairs[q].phi.c1_norm() * pairs[q].psi.c1_norm();
        s.t = t_grid;
        s.samples = n - dropped;
        s.discarded = samples.discarded + dropped;
        s.groups = groups;
        for (std::size_t k = 0; k < T; ++k) {
            detail::GroupSums all;
            for (std::size_t g = 0; g < groups; ++g)
                all += sums[g][q * T + k];
            s.c_hat.push_back(all.cov());
            s.std_err.push_back(jackknife_stderr(groups, [&](std::size_t g) { return (all - sums[g][q * T + k]).cov(); }));
        }
        detail::fit_window(s, min_fit_points);
    }
    return out;
}

inline void write_correlation_csv(std::ostream& os, const std::vector<CorrelationSeries>& all)
{
    os << "pair,t,C_hat,stderr\n";
    for (const auto& s : all)
        for (std::size_t k = 0; k < s.t.size(); ++k)
            os << s.phi_name << ':' << s.psi_name << ',' << fmt17(s.t[k]) << ',' << fmt17(s.c_hat[k]) << ','
               << fmt17(s.std_err[k]) << '\n';
    for (const auto& s : all) {
        const std::string p = "# " + s.phi_name + ':' + s.psi_name + '.';
        os << p << "signal=" << (s.signal ? 1 : 0) << '\n'
           << p << "delta_hat=" << fmt17(s.delta_hat) << '\n'
           << p << "intercept=" << fmt17(s.fit.intercept) << '\n'
           << p << "r2=" << fmt17(s.fit.r2) << '\n'
           << p << "window_lo=" << fmt17(s.window_lo) << '\n'
           << p << "window_hi=" << fmt17(s.window_hi) << '\n'
           << p << "norm_product=" << fmt17(s.norm_product) << '\n'
           << p << "samples=" << s.samples << '\n'
           << p << "discarded=" << s.discarded << '\n';
        if (!s.note.empty())
            os << p << "note=" << s.note << '\n';
    }
}

// ---- conditional measures on the leaves ----------------------------------------

// A function of (x, t) on the section with its t-derivative.
struct FiberObservable {
    std::function<double(double, double)> f;
    std::function<double(double, double)> dt;
};

inline FiberObservable as_fiber(const Observable& o)
{
    require(o.height_free(), "observable '" + o.name + "' depends on the height, not only on the section");
    return {[o](double x, double t) { return o(x, t, 0.0); }, [o](double x, double t) { return o.d_dy(x, t, 0.0); }};
}

// u o F_hat, for the invariance audit. Undefined leaves give 0.
inline FiberObservable compose_with_return(const Observable& o, const MarkovPartition& part, const FlowParams& flow)
{
    require(o.height_free(), "observable '" + o.name + "' depends on the height");
    auto fwd = [&part, &flow](double x, double t, double& slope) {
        const long i = part.find(x);
        if (i < 0)
            return std::pair<bool, SkewState>{false, {}};
        const Cell& c = part.cells[static_cast<std::size_t>(i)];
        slope = cell_fiber(flow, c, x).fiber.slope;
        return std::pair<bool, SkewState>{true, skew_step(flow, c, {x, t})};
    };
    return {[o, fwd](double x, double t) {
                double sl;
                auto [ok, w] = fwd(x, t, sl);
                return ok ? o(w.x, w.t, 0.0) : 0.0;
            },
            [o, fwd](double x, double t) {
                double sl = 0.0;
                auto [ok, w] = fwd(x, t, sl);
                return ok ? o.d_dy(w.x, w.t, 0.0) * sl : 0.0;
            }};
}

struct BranchSumConfig {
    double branch_mass = 0.99;    // heaviest cells kept until this share of nu
    int degree = 20;              // Chebyshev degree on Delta, retried at 2x
    double fit_tol = 1e-8;        // inverse branch, log-derivative and leaf offset
    double slope_fit_tol = 1e-6;  // log of the leaf slope, which only scales terms below 2e-4
    std::size_t moment_nodes = 257;
    double max_truncation = 0.02; // missing branch weight tolerated at any x
};

// One inverse branch h of F evaluated at y in Delta.
struct BranchValue {
    double h = 0.0;
    double log_dh = 0.0;     // log Dh(y) = -log DF(h y)
    double log_abs_a = 0.0;  // composite leaf slope at h(y)
    double a_sign = 1.0;
    double b = 0.0;          // composite leaf offset at h(y)
};

// Fitted inverse branches of the heaviest cells and a piecewise-linear phi.
struct BranchSum {
    Interval delta;
    FlowParams flow;
    const MarkovPartition* part = nullptr;
    GridDensity phi;
    std::vector<std::size_t> cells;                  // partition indices, heaviest first
    std::vector<std::array<std::vector<double>, 4>> coef;  // empty: evaluate exactly
    std::vector<double> a_sign;
    double kept_mass = 0.0, total_mass = 0.0;        // nu mass of kept / all certified cells
    std::size_t fitted_low = 0, fitted_high = 0, exact = 0;
    BranchSumConfig cfg;

    double phi_at(double x) const
    {
        const double u = (x - phi.grid.lo) / phi.width() - 0.5;
        const long n = static_cast<long>(phi.bins());
        if (u <= 0.0)
            return phi.values.front();
        if (u >= static_cast<double>(n - 1))
            return phi.values.back();
        const auto k = static_cast<std::size_t>(u);
        const double f = u - static_cast<double>(k);
        return (1.0 - f) * phi.values[k] + f * phi.values[k + 1];
    }

    BranchValue exact_value(std::size_t j, double y) const
    {
        const Cell& c = part->cells[cells[j]];
        const LorenzMap1D m = flow.lorenz_map();
        BranchValue v;
        v.h = static_cast<double>(induced_inverse(m, c, static_cast<long double>(y)));
        v.h = std::clamp(v.h, static_cast<double>(c.left), static_cast<double>(c.right));
        const CellFiber cf = cell_fiber(flow, c, v.h);
        v.log_dh = -cf.log_dF;
        v.log_abs_a = cf.log_abs_slope;
        v.a_sign = sgn(cf.fiber.slope);
        v.b = cf.fiber.offset;
        return v;
    }

    BranchValue value(std::size_t j, double y) const
    {
        const auto& k = coef[j];
        if (k[0].empty())
            return exact_value(j, y);
        const double t = std::clamp((2.0 * y - delta.lo - delta.hi) / delta.length(), -1.0, 1.0);
        return {detail::cheb_eval(k[0], t), detail::cheb_eval(k[1], t), detail::cheb_eval(k[2], t), a_sign[j],
                detail::cheb_eval(k[3], t)};
    }
};

template <IntervalMap M>
BranchSum build_branch_sum(const M& map, const MarkovPartition& part, const FlowParams& flow, const GridDensity& phi,
                           const BranchSumConfig& cfg = {}, const Parallel& par = {})
{
    (void)map;
    require(cfg.branch_mass > 0.0 && cfg.branch_mass <= 1.0, "branch mass share must be in (0, 1]");
    require(cfg.moment_nodes >= 2 && cfg.degree >= 2, "branch sum needs moment nodes and a fit degree");
    BranchSum bs;
    bs.delta = part.delta;
    bs.flow = flow;
    bs.part = &part;
    bs.phi = phi;
    bs.cfg = cfg;
    const auto nu = cell_masses(part, phi);
    std::vector<std::size_t> order(nu.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return nu[a] > nu[b]; });
    for (double v : nu)
        bs.total_mass += v;
    for (std::size_t i : order) {
        if (bs.kept_mass >= cfg.branch_mass * bs.total_mass)
            break;
        bs.cells.push_back(i);
        bs.kept_mass += nu[i];
    }
    const std::size_t K = bs.cells.size();
    bs.coef.resize(K);
    bs.a_sign.resize(K);
    std::vector<int> kind(K, 0);
    const Interval d = part.delta;
    par.blocks(K, 64, [&](std::size_t, std::size_t lo, std::size_t hi) {
        std::vector<double> vals;
        for (std::size_t j = lo; j < hi; ++j) {
            bs.a_sign[j] = bs.exact_value(j, d.mid()).a_sign;
            for (int deg : {cfg.degree, 2 * cfg.degree}) {
                std::array<std::vector<double>, 4> c;
                std::array<std::vector<double>, 4> v;
                for (auto& x : v)
                    x.resize(static_cast<std::size_t>(deg + 1));
                for (int q = 0; q <= deg; ++q) {
                    const double y = d.mid() + 0.5 * d.length() * detail::cheb_node(q, deg);
                    const BranchValue b = bs.exact_value(j, y);
                    v[0][q] = b.h, v[1][q] = b.log_dh, v[2][q] = b.log_abs_a, v[3][q] = b.b;
                }
                for (int f = 0; f < 4; ++f)
                    detail::cheb_coeffs(v[f], c[f]);
                bool ok = true;
                for (int q = 0; ok && q <= 8; ++q) {
                    const double t = -1.0 + 0.25 * q - (q == 8 ? 0.0 : 0.0625 * (q % 2));
                    const BranchValue b = bs.exact_value(j, d.mid() + 0.5 * d.length() * t);
                    ok = std::abs(detail::cheb_eval(c[0], t) - b.h) <= cfg.fit_tol &&
                         std::abs(detail::cheb_eval(c[1], t) - b.log_dh) <= cfg.fit_tol &&
                         std::abs(detail::cheb_eval(c[2], t) - b.log_abs_a) <= cfg.slope_fit_tol &&
                         std::abs(detail::cheb_eval(c[3], t) - b.b) <= cfg.fit_tol;
                }
                if (ok) {
                    bs.coef[j] = std::move(c);
                    kind[j] = deg == cfg.degree ? 1 : 2;
                    break;
                }
            }
        }
    });
    for (int k : kind)
        (k == 1 ? bs.fitted_low : k == 2 ? bs.fitted_high : bs.exact)++;
    return bs;
}

// First two moments of the leaf measures (L^k upsilon)_z on a grid over Delta,
// plus the lag-2 differences carried by their own linear recursion so they do
// not vanish in cancellation.
struct FiberMoments {
    Interval delta;
    std::vector<std::vector<double>> mean, second;     // [level][node]
    std::vector<std::vector<double>> dmean, dsecond;   // level k: value(k) - value(k-2), k >= 2
    std::vector<double> max_truncation;                // per level

    double node(std::size_t i) const
    {
        return delta.lo + delta.length() * static_cast<double>(i) / static_cast<double>(mean[0].size() - 1);
    }
    static double interp(const std::vector<double>& v, Interval d, double z)
    {
        const double u = std::clamp((z - d.lo) / d.length(), 0.0, 1.0) * static_cast<double>(v.size() - 1);
        const auto k = std::min(static_cast<std::size_t>(u), v.size() - 2);
        const double f = u - static_cast<double>(k);
        return (1.0 - f) * v[k] + f * v[k + 1];
    }
};

// Visit every kept branch at y with its normalized weight. Returns the missing
// weight 1 - sum_kept phi(h y) Dh(y) / phi(y).
template <class Visit>
double for_each_branch(const BranchSum& bs, double y, std::vector<BranchValue>& buf, std::vector<double>& wt,
                       Visit&& visit)
{
    const std::size_t K = bs.cells.size();
    buf.resize(K);
    wt.resize(K);
    double total = 0.0;
    for (std::size_t j = 0; j < K; ++j) {
        buf[j] = bs.value(j, y);
        wt[j] = bs.phi_at(buf[j].h) * std::exp(buf[j].log_dh);
        total += wt[j];
    }
    require(total > 0.0, "no branch weight at y = " + fmt17(y));
    for (std::size_t j = 0; j < K; ++j)
        visit(buf[j], wt[j] / total);
    return 1.0 - total / bs.phi_at(y);
}

inline FiberMoments fiber_moments(const BranchSum& bs, int levels, const Parallel& par = {})
{
    require(levels >= 1, "need at least one level of fiber moments");
    const std::size_t N = bs.cfg.moment_nodes;
    FiberMoments fm;
    fm.delta = bs.delta;
    fm.mean.assign(1, std::vector<double>(N, 0.0));
    fm.second.assign(1, std::vector<double>(N, 1.0 / 12.0));
    fm.dmean.assign(1, {});
    fm.dsecond.assign(1, {});
    fm.max_truncation.assign(1, 0.0);
    for (int k = 1; k < levels; ++k) {
        std::vector<double> m(N), e(N), dm(N, 0.0), de(N, 0.0), tr(N);
        const auto& pm = fm.mean.back();
        const auto& pe = fm.second.back();
        const bool lag = k >= 3;
        par.blocks(N, 8, [&](std::size_t, std::size_t lo, std::size_t hi) {
            std::vector<BranchValue> buf;
            std::vector<double> wt;
            for (std::size_t i = lo; i < hi; ++i) {
                double sm = 0.0, se = 0.0, sdm = 0.0, sde = 0.0;
                tr[i] = for_each_branch(bs, fm.node(i), buf, wt, [&](const BranchValue& b, double w) {
                    const double a = b.a_sign * std::exp(b.log_abs_a);
                    const double mz = FiberMoments::interp(pm, bs.delta, b.h);
                    const double ez = FiberMoments::interp(pe, bs.delta, b.h);
                    sm += w * (b.b + a * mz);
                    se += w * (b.b * b.b + 2.0 * a * b.b * mz + a * a * ez);
                    if (lag) {
                        const double dmz = FiberMoments::interp(fm.dmean.back(), bs.delta, b.h);
                        const double dez = FiberMoments::interp(fm.dsecond.back(), bs.delta, b.h);
                        sdm += w * a * dmz;
                        sde += w * (2.0 * a * b.b * dmz + a * a * dez);
                    }
                });
                m[i] = sm, e[i] = se;
                if (lag)
                    dm[i] = sdm, de[i] = sde;
            }
        });
        if (k == 2) {
            dm = m;
            for (std::size_t i = 0; i < N; ++i)
                de[i] = e[i] - 1.0 / 12.0;
        }
        fm.mean.push_back(std::move(m));
        fm.second.push_back(std::move(e));
        fm.dmean.push_back(std::move(dm));
        fm.dsecond.push_back(std::move(de));
        double worst = 0.0;
        for (double v : tr)
            worst = std::max(worst, std::abs(v));
        fm.max_truncation.push_back(worst);
    }
    return fm;
}

struct ConditionalEstimate {
    int n = 0;
    std::vector<double> x;
    std::vector<std::vector<double>> value;  // [observable][x]
    std::vector<double> truncation;          // missing branch weight per x
    double max_truncation = 0.0;
};

// (1/phi) P^n (phi . psi o F_hat^n_t) integrated over t, at each x. The
// outermost branch is summed explicitly; the deeper levels enter through the
// fiber moments, with psi averaged over the two points m +- sd (exact for
// psi quadratic along the leaf; the leaf slope is below 2e-4 per return).
inline ConditionalEstimate conditional_measure_estimate(const BranchSum& bs, const FiberMoments& fm,
                                                        const std::vector<FiberObservable>& psis, int n,
                                                        const std::vector<double>& x_grid, const Parallel& par = {})
{
    require(n >= 1 && static_cast<std::size_t>(n) <= fm.mean.size(), "fiber moments do not reach level n - 1");
    ConditionalEstimate ce;
    ce.n = n;
    ce.x = x_grid;
    ce.value.assign(psis.size(), std::vector<double>(x_grid.size(), 0.0));
    ce.truncation.assign(x_grid.size(), 0.0);
    const auto& pm = fm.mean[static_cast<std::size_t>(n - 1)];
    const auto& pe = fm.second[static_cast<std::size_t>(n - 1)];
    par.blocks(x_grid.size(), 16, [&](std::size_t, std::size_t lo, std::size_t hi) {
        std::vector<BranchValue> buf;
        std::vector<double> wt;
        for (std::size_t i = lo; i < hi; ++i) {
            const double x = x_grid[i];
            ce.truncation[i] = for_each_branch(bs, x, buf, wt, [&](const BranchValue& b, double w) {
                const double a = b.a_sign * std::exp(b.log_abs_a);
                const double mz = FiberMoments::interp(pm, bs.delta, b.h);
                const double sd = std::sqrt(std::max(0.0, FiberMoments::interp(pe, bs.delta, b.h) - mz * mz));
                const double t1 = b.b + a * (mz + sd), t2 = b.b + a * (mz - sd);
                for (std::size_t q = 0; q < psis.size(); ++q)
                    ce.value[q][i] += 0.5 * w * (psis[q].f(x, t1) + psis[q].f(x, t2));
            });
        }
    });
    for (double v : ce.truncation)
        ce.max_truncation = std::max(ce.max_truncation, std::abs(v));
    if (ce.max_truncation > bs.cfg.max_truncation)
        throw TruncationTooLarge("missing branch weight " + fmt17(ce.max_truncation) + " exceeds " +
                                 fmt17(bs.cfg.max_truncation));
    return ce;
}

// sup_x |estimate(n+2) - estimate(n)| per observable, from the lag-2 moment
// differences (first order in the leaf displacement).
struct CauchyLadder {
    std::vector<int> n;
    std::vector<std::vector<double>> gap;  // [observable][rung]
    std::vector<double> worst;             // max over observables per rung
    std::vector<double> ratio;             // worst[k+1] / worst[k]
    bool geometric = false;
};

inline CauchyLadder cauchy_ladder(const BranchSum& bs, const FiberMoments& fm, const std::vector<FiberObservable>& psis,
                                  const std::vector<int>& rungs, const std::vector<double>& x_grid,
                                  const Parallel& par = {})
{
    CauchyLadder cl;
    cl.n = rungs;
    cl.gap.assign(psis.size(), std::vector<double>(rungs.size(), 0.0));
    for (std::size_t r = 0; r < rungs.size(); ++r) {
        const int n = rungs[r];
        require(n >= 2 && static_cast<std::size_t>(n + 2) <= fm.mean.size(), "fiber moments too short for the ladder");
        const auto& m0 = fm.mean[static_cast<std::size_t>(n - 1)];
        const auto& e0 = fm.second[static_cast<std::size_t>(n - 1)];
        const auto& m1 = fm.mean[static_cast<std::size_t>(n + 1)];
        const auto& e1 = fm.second[static_cast<std::size_t>(n + 1)];
        const auto& dm = fm.dmean[static_cast<std::size_t>(n + 1)];
        const auto& de = fm.dsecond[static_cast<std::size_t>(n + 1)];
        std::vector<std::vector<double>> g(psis.size(), std::vector<double>(x_grid.size(), 0.0));
        par.blocks(x_grid.size(), 16, [&](std::size_t, std::size_t lo, std::size_t hi) {
            std::vector<BranchValue> buf;
            std::vector<double> wt;
            for (std::size_t i = lo; i < hi; ++i) {
                const double x = x_grid[i];
                for_each_branch(bs, x, buf, wt, [&](const BranchValue& b, double w) {
                    const double a = b.a_sign * std::exp(b.log_abs_a);
                    const double ma = FiberMoments::interp(m0, bs.delta, b.h), mb = FiberMoments::interp(m1, bs.delta, b.h);
                    const double sa = std::sqrt(std::max(0.0, FiberMoments::interp(e0, bs.delta, b.h) - ma * ma));
                    const double sb = std::sqrt(std::max(0.0, FiberMoments::interp(e1, bs.delta, b.h) - mb * mb));
                    const double ddm = FiberMoments::interp(dm, bs.delta, b.h);
                    const double dde = FiberMoments::interp(de, bs.delta, b.h);
                    const double dsd = sa + sb > 0.0 ? (dde - (ma + mb) * ddm) / (sa + sb) : 0.0;
                    for (int sgn_ : {1, -1}) {
                        const double mid = b.b + a * 0.5 * (ma + mb + sgn_ * (sa + sb));
                        const double shift = a * (ddm + sgn_ * dsd);
                        for (std::size_t q = 0; q < psis.size(); ++q)
                            g[q][i] += 0.5 * w * psis[q].dt(x, mid) * shift;
                    }
                });
            }
        });
        for (std::size_t q = 0; q < psis.size(); ++q)
            for (double v : g[q])
                cl.gap[q][r] = std::max(cl.gap[q][r], std::abs(v));
    }
    for (std::size_t r = 0; r < rungs.size(); ++r) {
        double w = 0.0;
        for (std::size_t q = 0; q < psis.size(); ++q)
            w = std::max(w, cl.gap[q][r]);
        cl.worst.push_back(w);
    }
    cl.geometric = cl.worst.size() >= 2;
    for (std::size_t r = 0; r + 1 < cl.worst.size(); ++r) {
        const double q = cl.worst[r] > 0.0 ? cl.worst[r + 1] / cl.worst[r] : 0.0;
        cl.ratio.push_back(q);
        if (!(cl.worst[r] > 0.0 && q < 1.0))
            cl.geometric = false;
    }
    return cl;
}

// int (est_n[u o F_hat]) dnu against int (est_{n+1}[u]) dnu on a uniform grid of Delta.
struct InvarianceAudit {
    double lhs = 0.0, rhs = 0.0, error = 0.0, truncation = 0.0;
    std::size_t unresolved_nodes = 0;
};

inline InvarianceAudit conditional_invariance_audit(const BranchSum& bs, const FiberMoments& fm, const Observable& u,
                                                    int n, std::size_t nodes, const Parallel& par = {})
{
    std::vector<double> xs(nodes);
    for (std::size_t i = 0; i < nodes; ++i)
        xs[i] = bs.delta.lo + (static_cast<double>(i) + 0.5) * bs.delta.length() / static_cast<double>(nodes);
    const auto lhs = conditional_measure_estimate(bs, fm, {compose_with_return(u, *bs.part, bs.flow)}, n, xs, par);
    const auto rhs = conditional_measure_estimate(bs, fm, {as_fiber(u)}, n + 1, xs, par);
    InvarianceAudit a;
    const double h = bs.delta.length() / static_cast<double>(nodes);
    for (std::size_t i = 0; i < nodes; ++i) {
        const double w = bs.phi_at(xs[i]) * h;
        if (bs.part->find(xs[i]) < 0)
            ++a.unresolved_nodes;
        a.lhs += w * lhs.value[0][i];
        a.rhs += w * rhs.value[0][i];
    }
    a.error = std::abs(a.lhs - a.rhs);
    a.truncation = std::max(lhs.max_truncation, rhs.max_truncation);
    return a;
}

// Finite-difference derivative of u_bar on the grid, its ratio to ||u||_C1,
// the residual of D u_bar + (D phi / phi) u_bar, and the spread of
// u_bar - 1/phi against int u d eta - 1.
struct SmoothnessEntry {
    std::string name;
    double sup_du_bar = 0.0;
    double c1_norm = 0.0;
    double constant = 0.0;              // sup |D u_bar| / ||u||_C1
    double ode_median_residual = 0.0;
    double median_du_bar = 0.0;
    bool ode_ok = false;                // median residual <= 0.1 median |D u_bar|
    double integral_eta = 0.0;          // int u_bar d nu
    double closed_form_dispersion = 0.0; // sd of u_bar - 1/phi - (int u d eta - 1)
    double leaf_constant_error = 0.0;   // max |u_bar - u| for leaf-constant u
};

struct SmoothnessReport {
    int n = 0;
    std::size_t bins = 0;
    std::vector<SmoothnessEntry> entries;
    double uniform_constant = 0.0;
    bool constant_finite = false;
    double max_truncation = 0.0;
};

inline double median_of(std::vector<double> v)
{
    require(!v.empty(), "median of an empty set");
    const auto mid = v.begin() + static_cast<long>(v.size() / 2);
    std::nth_element(v.begin(), mid, v.end());
    if (v.size() % 2)
        return *mid;
    return 0.5 * (*mid + *std::max_element(v.begin(), mid));
}

inline SmoothnessReport disintegration_smoothness_check(const BranchSum& bs, const FiberMoments& fm,
                                                        const std::vector<Observable>& library, int n,
                                                        std::size_t bins, const Parallel& par = {})
{
    require(bins >= 3, "smoothness check needs at least three grid points");
    std::vector<double> xs(bins);
    const double h = bs.delta.length() / static_cast<double>(bins);
    for (std::size_t i = 0; i < bins; ++i)
        xs[i] = bs.delta.lo + (static_cast<double>(i) + 0.5) * h;
    std::vector<Observable> used;
    std::vector<FiberObservable> psis;
    for (const auto& o : library)
        if (o.height_free()) {
            used.push_back(o);
            psis.push_back(as_fiber(o));
        }
    const auto ce = conditional_measure_estimate(bs, fm, psis, n, xs, par);
    SmoothnessReport rep;
    rep.n = n;
    rep.bins = bins;
    rep.max_truncation = ce.max_truncation;
    std::vector<double> ph(bins), dph(bins);
    for (std::size_t i = 0; i < bins; ++i)
        ph[i] = bs.phi_at(xs[i]);
    auto diff = [&](const std::vector<double>& v, std::size_t i) {
        if (i == 0)
            return (v[1] - v[0]) / h;
        if (i + 1 == v.size())
            return (v[i] - v[i - 1]) / h;
        return (v[i + 1] - v[i - 1]) / (2.0 * h);
    };
    for (std::size_t i = 0; i < bins; ++i)
        dph[i] = diff(ph, i);
    double mass = 0.0;
    for (double p : ph)
        mass += p * h;
    for (std::size_t q = 0; q < used.size(); ++q) {
        const auto& ub = ce.value[q];
        SmoothnessEntry e;
        e.name = used[q].name;
        e.c1_norm = used[q].c1_norm();
        std::vector<double> res(bins), adu(bins);
        for (std::size_t i = 0; i < bins; ++i) {
            const double du = diff(ub, i);
            adu[i] = std::abs(du);
            e.sup_du_bar = std::max(e.sup_du_bar, adu[i]);
            res[i] = std::abs(du + dph[i] / ph[i] * ub[i]);
            e.integral_eta += ub[i] * ph[i] * h;
            if (used[q].leaf_constant())
                e.leaf_constant_error = std::max(e.leaf_constant_error, std::abs(ub[i] - used[q](xs[i], 0.0, 0.0)));
        }
        e.integral_eta /= mass;
        e.constant = e.sup_du_bar / e.c1_norm;
        e.ode_median_residual = median_of(res);
        e.median_du_bar = median_of(adu);
        e.ode_ok = e.ode_median_residual <= 0.1 * e.median_du_bar;
        double s1 = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < bins; ++i) {
            const double d = ub[i] - 1.0 / ph[i] - (e.integral_eta - 1.0);
            s1 += d;
            s2 += d * d;
        }
        const double nb = static_cast<double>(bins);
        e.closed_form_dispersion = std::sqrt(std::max(0.0, s2 / nb - (s1 / nb) * (s1 / nb)));
        rep.uniform_constant = std::max(rep.uniform_constant, e.constant);
        rep.entries.push_back(e);
    }
    rep.constant_finite = std::isfinite(rep.uniform_constant);
    return rep;
}

}  // namespace glorenz

#endif
