#ifndef GLORENZ_TRANSFER_HPP
#define GLORENZ_TRANSFER_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include "core.hpp"
#include "lorenz_map.hpp"
#include "parallel.hpp"
#include "partition.hpp"
#include "rng.hpp"

namespace glorenz {

// Piecewise-constant density on a uniform grid.
struct GridDensity {
    Interval grid;
    std::vector<double> values;

    std::size_t bins() const { return values.size(); }
    double width() const { return grid.length() / static_cast<double>(values.size()); }
    double center(std::size_t i) const { return grid.lo + (static_cast<double>(i) + 0.5) * width(); }
    double edge(std::size_t i) const { return grid.lo + static_cast<double>(i) * width(); }
    double integral() const
    {
        double s = 0.0;
        for (double v : values)
            s += v;
        return s * width();
    }
    long bin_of(double x) const
    {
        if (!(x >= grid.lo && x <= grid.hi))
            return -1;
        const auto i = static_cast<long>((x - grid.lo) / width());
        return std::min<long>(i, static_cast<long>(values.size()) - 1);
    }
    double at(double x) const
    {
        const long i = bin_of(x);
        return i < 0 ? 0.0 : values[static_cast<std::size_t>(i)];
    }
    void normalize()
    {
        const double s = integral();
        require(s > 0.0, "cannot normalize a density with zero mass");
        for (double& v : values)
            v /= s;
    }
};

inline double l1_distance(const GridDensity& a, const GridDensity& b)
{
    require(a.bins() == b.bins(), "L1 distance needs equal grids");
    double s = 0.0;
    for (std::size_t i = 0; i < a.bins(); ++i)
        s += std::abs(a.values[i] - b.values[i]);
    return s * a.width();
}

inline void write_density_csv(std::ostream& os, const GridDensity& d)
{
    os << "bin_center,value\n";
    for (std::size_t i = 0; i < d.bins(); ++i)
        os << fmt17(d.center(i)) << ',' << fmt17(d.values[i]) << '\n';
}

// Ulam discretization of the transfer operator of F on Delta:
// mass(i, k) = Leb(bin_i  intersect  F^{-1} bin_k), row-major.
struct UlamOperator {
    Interval delta;
    std::size_t m = 0;
    std::vector<double> mass;
    double unresolved_fraction = 0.0;  // |Delta| share with no certified branch
    std::size_t cheb_low = 0, cheb_high = 0, exact_cells = 0, straddlers = 0;
    std::size_t piecewise_evals = 0;  // branch evaluations spent on cells needing a piecewise fit

    double width() const { return delta.length() / static_cast<double>(m); }

    // (P psi)_k = sum_i psi_i mass(i,k) / w. Column blocks are independent.
    GridDensity apply(const GridDensity& psi, const Parallel& par = {}) const
    {
        require(psi.bins() == m, "density grid does not match the operator");
        GridDensity out{delta, std::vector<double>(m, 0.0)};
        const double w = width();
        par.blocks(m, 512, [&](std::size_t, std::size_t lo, std::size_t hi) {
            for (std::size_t i = 0; i < m; ++i) {
                const double p = psi.values[i] / w;
                if (p == 0.0)
                    continue;
                const double* row = &mass[i * m];
                for (std::size_t k = lo; k < hi; ++k)
                    out.values[k] += p * row[k];
            }
        });
        return out;
    }
};

struct UlamConfig {
    std::size_t bins = 4096;
    int degree_low = 6;       // Chebyshev degree tried first
    int degree_high = 16;
    double fit_tol = 1e-6;    // relative to the cell length, at the check points
    double max_unresolved = 1e-2;
};

namespace detail {

// Anchor chain for one cell: z[i] is the pullback of Delta.lo to step i.
template <IntervalMap M>
void anchor_chain(const M& m, const Cell& c, double y0, std::vector<double>& z)
{
    z.resize(static_cast<std::size_t>(c.R) + 1);
    z[static_cast<std::size_t>(c.R)] = y0;
    for (int i = c.R - 1; i >= 0; --i)
        z[static_cast<std::size_t>(i)] = branch_inverse_fast(m, c.branch(i), z[static_cast<std::size_t>(i) + 1]);
}

// h(y0 + dy) - h(y0) through the whole itinerary, relative accuracy kept for tiny cells.
template <IntervalMap M>
double cell_increment(const M& m, const Cell& c, const std::vector<double>& z, double dy)
{
    double d = dy;
    for (int i = c.R - 1; i >= 0; --i) {
        const auto s = static_cast<std::size_t>(i);
        d = inverse_increment(m, c.branch(i), z[s + 1], z[s], d);
    }
    return d;
}

inline double cheb_node(int j, int deg) { return std::cos(std::numbers::pi * (j + 0.5) / (deg + 1)); }

// Chebyshev coefficients from values at the first-kind nodes.
inline void cheb_coeffs(const std::vector<double>& vals, std::vector<double>& c)
{
    const int n = static_cast<int>(vals.size());
    c.assign(static_cast<std::size_t>(n), 0.0);
    for (int k = 0; k < n; ++k) {
        double s = 0.0;
        for (int j = 0; j < n; ++j)
            s += vals[static_cast<std::size_t>(j)] * std::cos(std::numbers::pi * k * (j + 0.5) / n);
        c[static_cast<std::size_t>(k)] = (k == 0 ? 1.0 : 2.0) * s / n;
    }
}

inline double cheb_eval(const std::vector<double>& c, double t)
{
    double b1 = 0.0, b2 = 0.0;
    for (std::size_t k = c.size(); k-- > 1;) {
        const double b0 = 2.0 * t * b1 - b2 + c[k];
        b2 = b1;
        b1 = b0;
    }
    return t * b1 - b2 + c[0];
}

// Fit g on [t0,t1] with a Chebyshev series, check it, and split in halves where
// it fails. Pieces with few grid points left are evaluated directly.
// out[k] receives g(grid[k]) for every grid point in [t0, t1].
template <class G>
void piecewise_on_grid(G&& g, double t0, double t1, double g0, double g1, int deg, double tol,
                       const std::vector<double>& grid, std::vector<double>& out, std::vector<double>& vals,
                       std::vector<double>& coef, std::size_t& evals)
{
    const double n = static_cast<double>(grid.size() - 1);
    const auto k0 = static_cast<std::size_t>(std::max(0.0, std::ceil((t0 + 1.0) * 0.5 * n - 1e-9)));
    const auto k1 = static_cast<std::size_t>(std::min(n, std::floor((t1 + 1.0) * 0.5 * n + 1e-9)));
    const std::size_t inside = k1 >= k0 ? k1 - k0 + 1 : 0;
    if (inside == 0)
        return;
    if (inside <= static_cast<std::size_t>(2 * deg + 16)) {
        for (std::size_t k = k0; k <= k1; ++k)
            out[k] = grid[k] <= t0 ? g0 : grid[k] >= t1 ? g1 : g(grid[k]);
        evals += inside;
        return;
    }
    const double mid = 0.5 * (t0 + t1), half = 0.5 * (t1 - t0);
    vals.resize(static_cast<std::size_t>(deg + 1));
    for (int j = 0; j <= deg; ++j)
        vals[static_cast<std::size_t>(j)] = g(mid + half * cheb_node(j, deg));
    evals += static_cast<std::size_t>(deg + 8);
    cheb_coeffs(vals, coef);
    bool ok = std::abs(cheb_eval(coef, -1.0) - g0) <= tol && std::abs(cheb_eval(coef, 1.0) - g1) <= tol;
    for (int q = 1; ok && q < 8; ++q) {
        const double s = std::cos(std::numbers::pi * (q + 0.25) / 8.0);
        ok = std::abs(cheb_eval(coef, s) - g(mid + half * s)) <= tol;
    }
    if (ok) {
        for (std::size_t k = k0; k <= k1; ++k)
            out[k] = cheb_eval(coef, std::clamp((grid[k] - mid) / half, -1.0, 1.0));
        return;
    }
    const double gm = g(mid);
    piecewise_on_grid(g, t0, mid, g0, gm, deg, tol, grid, out, vals, coef, evals);
    piecewise_on_grid(g, mid, t1, gm, g1, deg, tol, grid, out, vals, coef, evals);
}

}  // namespace detail

// Cells inside one source bin are summed as Chebyshev series of their inverse
// branch (shifted to start at 0), validated at check points, with an exact
// grid pullback when the fit fails. Cells crossing bin edges are done exactly.
template <IntervalMap M>
UlamOperator build_ulam(const M& map, const MarkovPartition& part, const UlamConfig& cfg = {}, const Parallel& par = {})
{
    require(cfg.bins >= 2 && !part.cells.empty(), "Ulam operator needs >= 2 bins and a nonempty partition");
    const double L = part.delta.length();
    UlamOperator op;
    op.delta = part.delta;
    op.m = cfg.bins;
    op.unresolved_fraction = std::max(0.0, 1.0 - part.covered / L);
    if (op.unresolved_fraction > cfg.max_unresolved)
        throw UnresolvedMassTooLarge("partition leaves " + fmt17(op.unresolved_fraction) +
                                     " of Delta without a branch (limit " + fmt17(cfg.max_unresolved) + ")");
    const std::size_t m = cfg.bins;
    const double w = op.width();
    const Interval D = part.delta;
    op.mass.assign(m * m, 0.0);
    const int dh = cfg.degree_high;

    // grid on Delta and Chebyshev table at the grid edges
    std::vector<double> tgrid(m + 1);
    for (std::size_t k = 0; k <= m; ++k)
        tgrid[k] = std::clamp(-1.0 + 2.0 * static_cast<double>(k) / static_cast<double>(m), -1.0, 1.0);
    std::vector<double> Tk(static_cast<std::size_t>(dh + 1) * (m + 1));
    for (std::size_t k = 0; k <= m; ++k) {
        double t0 = 1.0, t1 = tgrid[k];
        for (int n = 0; n <= dh; ++n) {
            Tk[static_cast<std::size_t>(n) * (m + 1) + k] = n == 0 ? 1.0 : t1;
            if (n >= 1) {
                const double t2 = 2.0 * tgrid[k] * t1 - t0;
                t0 = t1;
                t1 = t2;
            }
        }
    }

    // group cells: contiguous runs per source bin, plus cells that cross an edge
    auto bin_index = [&](long double x) {
        const auto i = static_cast<long>(std::floor(static_cast<double>((x - D.lo) / w)));
        return std::clamp<long>(i, 0, static_cast<long>(m) - 1);
    };
    std::vector<std::size_t> straddle;
    std::vector<long> home(part.cells.size());
    // cells are sorted, so each source bin owns a contiguous index range
    std::vector<std::size_t> row_begin(m + 1, part.cells.size());
    for (std::size_t c = part.cells.size(); c-- > 0;) {
        const long a = bin_index(part.cells[c].left), b = bin_index(part.cells[c].right);
        const bool crosses = a != b && !(b == a + 1 && part.cells[c].right <= D.lo + static_cast<long double>(b) * w);
        home[c] = crosses ? -1 : a;
        row_begin[static_cast<std::size_t>(a)] = c;
    }
    for (std::size_t i = m; i-- > 0;)
        row_begin[i] = std::min(row_begin[i], row_begin[i + 1]);
    for (std::size_t c = 0; c < part.cells.size(); ++c)
        if (home[c] < 0)
            straddle.push_back(c);

    struct RowStats {
        std::size_t low = 0, high = 0, exact = 0, evals = 0;
    };
    std::vector<RowStats> stats(m);

    const double y0 = D.lo;
    par.blocks(m, 8, [&](std::size_t, std::size_t rlo, std::size_t rhi) {
        std::vector<double> z, vals, coef, sum(static_cast<std::size_t>(dh + 1)), exact(m + 1), direct(m);
        for (std::size_t i = rlo; i < rhi; ++i) {
            std::fill(sum.begin(), sum.end(), 0.0);
            std::fill(direct.begin(), direct.end(), 0.0);
            bool any_direct = false;
            RowStats st;
            for (std::size_t ci = row_begin[i]; ci < row_begin[i + 1]; ++ci) {
                if (home[ci] != static_cast<long>(i))
                    continue;
                const Cell& c = part.cells[ci];
                const double len = c.length();
                detail::anchor_chain(map, c, y0, z);
                auto g = [&](double t) { return t <= -1.0 ? 0.0 : detail::cell_increment(map, c, z, (t + 1.0) * 0.5 * L); };
                bool done = false;
                for (int deg : {cfg.degree_low, cfg.degree_high}) {
                    vals.resize(static_cast<std::size_t>(deg + 1));
                    for (int j = 0; j <= deg; ++j)
                        vals[static_cast<std::size_t>(j)] = g(detail::cheb_node(j, deg));
                    detail::cheb_coeffs(vals, coef);
                    bool ok = std::abs(detail::cheb_eval(coef, -1.0)) <= cfg.fit_tol * len &&
                              std::abs(detail::cheb_eval(coef, 1.0) - len) <= cfg.fit_tol * len;
                    for (int q = 1; ok && q < 8; ++q) {
                        const double t = std::cos(std::numbers::pi * (q + 0.25) / 8.0);
                        ok = std::abs(detail::cheb_eval(coef, t) - g(t)) <= cfg.fit_tol * len;
                    }
                    if (ok) {
                        for (std::size_t n = 0; n < coef.size(); ++n)
                            sum[n] += coef[n];
                        (deg == cfg.degree_low ? st.low : st.high) += 1;
                        done = true;
                        break;
                    }
                }
                if (!done) {
                    detail::piecewise_on_grid(g, -1.0, 1.0, 0.0, len, cfg.degree_low, cfg.fit_tol * len, tgrid, exact,
                                              vals, coef, st.evals);
                    exact[0] = 0.0;
                    exact[m] = len;
                    for (std::size_t k = 0; k < m; ++k)
                        direct[k] += exact[k + 1] - exact[k];
                    any_direct = true;
                    ++st.exact;
                }
            }
            double* row = &op.mass[i * m];
            double prev = 0.0;
            for (std::size_t k = 0; k <= m; ++k) {
                double v = 0.0;
                for (int n = 0; n <= dh; ++n)
                    v += sum[static_cast<std::size_t>(n)] * Tk[static_cast<std::size_t>(n) * (m + 1) + k];
                if (k > 0)
                    row[k - 1] = std::max(0.0, v - prev) + (any_direct ? direct[k - 1] : 0.0);
                prev = v;
            }
            stats[i] = st;
        }
    });

    // edge-crossing cells: exact pullback of the whole target grid
    const std::size_t chunk = 64;
    for (std::size_t s0 = 0; s0 < straddle.size(); s0 += chunk) {
        const std::size_t s1 = std::min(straddle.size(), s0 + chunk);
        std::vector<std::vector<double>> H(s1 - s0);
        par.each(s1 - s0, [&](std::size_t q) {
            const Cell& c = part.cells[straddle[s0 + q]];
            std::vector<double> z;
            detail::anchor_chain(map, c, y0, z);
            auto& h = H[q];
            h.resize(m + 1);
            for (std::size_t k = 0; k <= m; ++k)
                h[k] = k == 0 ? 0.0 : k == m ? c.length() : detail::cell_increment(map, c, z, (tgrid[k] + 1.0) * 0.5 * L);
        }, 1);
        for (std::size_t q = 0; q < H.size(); ++q) {
            const Cell& c = part.cells[straddle[s0 + q]];
            const auto& h = H[q];
            const long a = bin_index(c.left), b = bin_index(c.right);
            for (long i = a; i <= b; ++i) {
                // source bin i in cell-relative coordinates
                const double u = std::max(0.0, static_cast<double>(D.lo + static_cast<long double>(i) * w - c.left));
                const double v = std::min(c.length(), static_cast<double>(D.lo + static_cast<long double>(i + 1) * w - c.left));
                if (!(v > u))
                    continue;
                auto k0 = static_cast<std::size_t>(std::upper_bound(h.begin(), h.end(), u) - h.begin());
                k0 = k0 == 0 ? 0 : k0 - 1;
                double* row = &op.mass[static_cast<std::size_t>(i) * m];
                for (std::size_t k = k0; k < m && h[k] < v; ++k) {
                    const double lo = std::max(h[k], u), hi = std::min(h[k + 1], v);
                    if (hi > lo)
                        row[k] += hi - lo;
                }
            }
        }
    }
    for (const auto& st : stats) {
        op.cheb_low += st.low;
        op.cheb_high += st.high;
        op.exact_cells += st.exact;
        op.piecewise_evals += st.evals;
    }
    op.straddlers = straddle.size();
    return op;
}

struct DensityResult {
    GridDensity phi;
    double residual = 0.0;        // ||P phi - phi||_1
    double eigen_residual = 0.0;  // ||P phi / int P phi - phi||_1
    double leak = 0.0;            // 1 - int P phi
    int iterations = 0;
    std::vector<double> residual_log;  // ||P psi - psi||_1 per iterate, floors at the leak
    std::vector<double> step_log;      // L1 change between normalized iterates
    double min_value = 0.0;
    double max_gradient = 0.0;  // discrete C^1 proxy
};

// Plain power iteration from the uniform density, renormalized each step.
inline DensityResult invariant_density(const UlamOperator& op, double tol = 1e-3, int iter_cap = 2000,
                                       double min_mass = 0.999, double step_tol = 1e-13, const Parallel& par = {})
{
    require(1.0 - op.unresolved_fraction >= min_mass,
            "invariant density needs partition mass >= " + fmt17(min_mass) + ", got " + fmt17(1.0 - op.unresolved_fraction));
    DensityResult r;
    GridDensity psi{op.delta, std::vector<double>(op.m, 1.0 / op.delta.length())};
    const double w = op.width();
    for (int it = 1; it <= iter_cap; ++it) {
        GridDensity next = op.apply(psi, par);
        double res = 0.0;
        for (std::size_t k = 0; k < op.m; ++k)
            res += std::abs(next.values[k] - psi.values[k]);
        res *= w;
        r.residual_log.push_back(res);
        const double mass = next.integral();
        require(mass > 0.0, "transfer operator annihilated the density");
        double step = 0.0;
        for (std::size_t k = 0; k < op.m; ++k) {
            next.values[k] /= mass;
            step += std::abs(next.values[k] - psi.values[k]);
        }
        step *= w;
        r.step_log.push_back(step);
        psi = std::move(next);
        r.iterations = it;
        if (step <= step_tol)
            break;
    }
    const GridDensity img = op.apply(psi, par);
    r.residual = l1_distance(img, psi);
    r.leak = 1.0 - img.integral();
    GridDensity normed = img;
    normed.normalize();
    r.eigen_residual = l1_distance(normed, psi);
    r.min_value = *std::min_element(psi.values.begin(), psi.values.end());
    for (std::size_t k = 0; k + 1 < op.m; ++k)
        r.max_gradient = std::max(r.max_gradient, std::abs(psi.values[k + 1] - psi.values[k]) / w);
    r.phi = std::move(psi);
    if (r.residual > tol)
        throw NoConvergence("invariant density residual " + fmt17(r.residual) + " > tol " + fmt17(tol) + " after " +
                            std::to_string(r.iterations) + " iterations (leak " + fmt17(r.leak) + ")");
    return r;
}

// sup of P^n 1 for each requested n.
struct SpectralProbe {
    std::vector<int> n;
    std::vector<double> sup;
    std::vector<double> root;  // sup^(1/n)
};

inline SpectralProbe spectral_radius_probe(const UlamOperator& op, const std::vector<int>& powers,
                                           const Parallel& par = {})
{
    SpectralProbe p;
    GridDensity psi{op.delta, std::vector<double>(op.m, 1.0)};
    const int nmax = powers.empty() ? 0 : *std::max_element(powers.begin(), powers.end());
    for (int k = 1; k <= nmax; ++k) {
        psi = op.apply(psi, par);
        if (std::find(powers.begin(), powers.end(), k) != powers.end()) {
            const double s = *std::max_element(psi.values.begin(), psi.values.end());
            p.n.push_back(k);
            p.sup.push_back(s);
            p.root.push_back(std::pow(s, 1.0 / k));
        }
    }
    return p;
}

// Step function on the grid: `pieces` constant runs with breakpoints on bin
// edges, values uniform in [lo, hi).
inline GridDensity random_step_function(Interval grid, std::size_t bins, std::size_t pieces, double lo, double hi,
                                        Rng& rng)
{
    require(pieces >= 1 && pieces <= bins, "step function needs 1 <= pieces <= bins");
    std::vector<std::size_t> cuts{0, bins};
    while (cuts.size() < pieces + 1) {
        const std::size_t c = 1 + static_cast<std::size_t>(rng.below(bins - 1));
        if (std::find(cuts.begin(), cuts.end(), c) == cuts.end())
            cuts.push_back(c);
    }
    std::sort(cuts.begin(), cuts.end());
    GridDensity f{grid, std::vector<double>(bins)};
    for (std::size_t p = 0; p + 1 < cuts.size(); ++p) {
        const double v = rng.uniform(lo, hi);
        for (std::size_t k = cuts[p]; k < cuts[p + 1]; ++k)
            f.values[k] = v;
    }
    return f;
}

// Both sides of  int (g o F) psi = int g (P psi)  for a fixed g and several psi.
// The left side pulls the breakpoints of g back through every cell with the
// plain inverse branches, so it does not share code with the matrix build.
struct DualityResult {
    std::vector<double> lhs, rhs;
    double max_error = 0.0;
};

template <IntervalMap M>
DualityResult duality_check(const M& map, const MarkovPartition& part, const UlamOperator& op, const GridDensity& g,
                            const std::vector<GridDensity>& psis, const Parallel& par = {})
{
    require(g.bins() == op.m, "observable grid does not match the operator");
    // pieces of g: runs of equal value
    std::vector<double> ycut{op.delta.lo};
    std::vector<double> gval;
    for (std::size_t k = 0; k < g.bins(); ++k) {
        if (k > 0 && g.values[k] != g.values[k - 1]) {
            ycut.push_back(g.edge(k));
            gval.push_back(g.values[k - 1]);
        }
    }
    ycut.push_back(op.delta.hi);
    gval.push_back(g.values.back());

    // preimages of the cuts, per cell; block-local then merged in order
    const std::size_t P = ycut.size();
    std::vector<double> pre(part.cells.size() * P);
    par.blocks(part.cells.size(), 4096, [&](std::size_t, std::size_t lo, std::size_t hi) {
        for (std::size_t c = lo; c < hi; ++c) {
            const Cell& cell = part.cells[c];
            for (std::size_t q = 0; q < P; ++q) {
                double y = ycut[q];
                if (q == 0 || q + 1 == P) {
                    pre[c * P + q] = static_cast<double>(q == 0 ? cell.left : cell.right);
                    continue;
                }
                for (int i = cell.R - 1; i >= 0; --i)
                    y = branch_inverse_fast(map, cell.branch(i), y);
                pre[c * P + q] = std::clamp(y, static_cast<double>(cell.left), static_cast<double>(cell.right));
            }
        }
    });

    DualityResult r;
    for (const auto& psi : psis) {
        require(psi.bins() == op.m, "density grid does not match the operator");
        std::vector<double> cum(psi.bins() + 1, 0.0);
        for (std::size_t k = 0; k < psi.bins(); ++k)
            cum[k + 1] = cum[k] + psi.values[k] * psi.width();
        auto prim = [&](double x) {
            const double u = std::clamp((x - psi.grid.lo) / psi.width(), 0.0, static_cast<double>(psi.bins()));
            const auto k = std::min(static_cast<std::size_t>(u), psi.bins() - 1);
            return cum[k] + (u - static_cast<double>(k)) * psi.values[k] * psi.width();
        };
        double lhs = 0.0;
        for (std::size_t c = 0; c < part.cells.size(); ++c) {
            for (std::size_t q = 0; q + 1 < P; ++q)
                lhs += gval[q] * (prim(pre[c * P + q + 1]) - prim(pre[c * P + q]));
        }
        const GridDensity img = op.apply(psi, par);
        double rhs = 0.0;
        for (std::size_t k = 0; k < op.m; ++k)
            rhs += g.values[k] * img.values[k];
        rhs *= op.width();
        r.lhs.push_back(lhs);
        r.rhs.push_back(rhs);
        r.max_error = std::max(r.max_error, std::abs(lhs - rhs));
    }
    return r;
}

// ---- pullback to an f-invariant measure on I --------------------------------

struct Nu0Result {
    GridDensity density;        // on the whole interval I
    double mean_R = 0.0;        // sum_c R_c nu(c)
    double layer_cake = 0.0;    // sum_k nu{R > k}
    double truncated = 0.0;     // nu-mass of Delta outside certified cells
};

// nu(cell) from the piecewise-constant phi, exactly.
inline std::vector<double> cell_masses(const MarkovPartition& part, const GridDensity& phi)
{
    std::vector<double> nu(part.cells.size());
    const double w = phi.width();
    for (std::size_t c = 0; c < part.cells.size(); ++c) {
        const double a = static_cast<double>(part.cells[c].left), b = static_cast<double>(part.cells[c].right);
        long i = std::max<long>(0, static_cast<long>((a - phi.grid.lo) / w));
        double s = 0.0;
        for (; i < static_cast<long>(phi.bins()); ++i) {
            const double lo = std::max(a, phi.edge(static_cast<std::size_t>(i))),
                         hi = std::min(b, phi.edge(static_cast<std::size_t>(i)) + w);
            if (lo >= b)
                break;
            if (hi > lo)
                s += (hi - lo) * phi.values[static_cast<std::size_t>(i)];
        }
        nu[c] = s;
    }
    return nu;
}

// Stratified quadrature: `per_bin` points in every bin of phi, each carried
// through f^k for k < R of its cell. visit(x, weight) sees every pushed point.
template <IntervalMap M, class Visit>
void nu0_points(const M& map, const MarkovPartition& part, const GridDensity& phi, std::size_t per_bin, Visit&& visit)
{
    const double w = phi.width();
    for (std::size_t i = 0; i < phi.bins(); ++i) {
        const double wt = phi.values[i] * w / static_cast<double>(per_bin);
        for (std::size_t s = 0; s < per_bin; ++s) {
            const double x = phi.edge(i) + (static_cast<double>(s) + 0.5) / static_cast<double>(per_bin) * w;
            const long ci = part.find(x);
            if (ci < 0)
                continue;
            const Cell& c = part.cells[static_cast<std::size_t>(ci)];
            double z = x;
            for (int k = 0; k < c.R; ++k) {
                visit(z, wt, k, c);
                z = map.branch_eval_d(c.branch(k), z);
            }
        }
    }
}

// sum_k (f^k)_*(nu restricted to R > k) / int R dnu, binned on I. The cell
// masses and int R dnu are exact for piecewise-constant phi; the push-forward
// uses `per_bin` equally spaced points in every bin of phi.
template <IntervalMap M>
Nu0Result pullback_nu0(const M& map, const MarkovPartition& part, const GridDensity& phi, std::size_t bins_I = 1000,
                       std::size_t per_bin = 1024, const Parallel& par = {})
{
    require(bins_I >= 1 && per_bin >= 1, "pullback needs bins and quadrature points");
    Nu0Result r;
    const auto nu = cell_masses(part, phi);
    int rmax = 0;
    double covered_nu = 0.0;
    for (std::size_t c = 0; c < nu.size(); ++c) {
        r.mean_R += part.cells[c].R * nu[c];
        rmax = std::max(rmax, part.cells[c].R);
        covered_nu += nu[c];
    }
    r.truncated = std::max(0.0, 1.0 - covered_nu);
    std::vector<double> above(static_cast<std::size_t>(rmax) + 1, 0.0);
    for (std::size_t c = 0; c < nu.size(); ++c)
        for (int k = 0; k < part.cells[c].R; ++k)
            above[static_cast<std::size_t>(k)] += nu[c];
    for (double v : above)
        r.layer_cake += v;

    const Interval I = map.domain();
    const double wI = I.length() / static_cast<double>(bins_I);
    // fixed blocks of phi's bins, one histogram each, merged in order
    const std::size_t block = 64;
    const std::size_t nb = (phi.bins() + block - 1) / block;
    std::vector<std::vector<double>> hist(nb, std::vector<double>(bins_I, 0.0));
    par.blocks(phi.bins(), block, [&](std::size_t b, std::size_t lo, std::size_t hi) {
        GridDensity sub{{phi.edge(lo), phi.edge(lo) + static_cast<double>(hi - lo) * phi.width()},
                        std::vector<double>(phi.values.begin() + static_cast<long>(lo), phi.values.begin() + static_cast<long>(hi))};
        auto& h = hist[b];
        nu0_points(map, part, sub, per_bin, [&](double z, double wt, int, const Cell&) {
            const auto k = std::clamp<long>(static_cast<long>((z - I.lo) / wI), 0, static_cast<long>(bins_I) - 1);
            h[static_cast<std::size_t>(k)] += wt;
        });
    });
    r.density = GridDensity{I, std::vector<double>(bins_I, 0.0)};
    for (const auto& h : hist)
        for (std::size_t k = 0; k < bins_I; ++k)
            r.density.values[k] += h[k];
    for (double& v : r.density.values)
        v /= wI * r.mean_R;
    return r;
}

// |int g o f dnu0 - int g dnu0| for each test function g on I, with the same
// quadrature points as the pullback.
template <IntervalMap M>
std::vector<double> nu0_invariance_defect(const M& map, const MarkovPartition& part, const GridDensity& phi,
                                          const std::vector<GridDensity>& tests, double mean_R,
                                          std::size_t per_bin = 256, const Parallel& par = {})
{
    require(mean_R > 0.0, "invariance check needs the mean return time");
    const std::size_t block = 64;
    const std::size_t nb = (phi.bins() + block - 1) / block;
    std::vector<std::vector<double>> acc(nb, std::vector<double>(tests.size(), 0.0));
    par.blocks(phi.bins(), block, [&](std::size_t b, std::size_t lo, std::size_t hi) {
        GridDensity sub{{phi.edge(lo), phi.edge(lo) + static_cast<double>(hi - lo) * phi.width()},
                        std::vector<double>(phi.values.begin() + static_cast<long>(lo), phi.values.begin() + static_cast<long>(hi))};
        nu0_points(map, part, sub, per_bin, [&](double z, double wt, int k, const Cell& c) {
            const double fz = map.branch_eval_d(c.branch(k), z);
            for (std::size_t t = 0; t < tests.size(); ++t)
                acc[b][t] += wt * (tests[t].at(fz) - tests[t].at(z));
        });
    });
    std::vector<double> out(tests.size(), 0.0);
    for (const auto& a : acc)
        for (std::size_t t = 0; t < tests.size(); ++t)
            out[t] += a[t];
    for (double& v : out)
        v = std::abs(v) / mean_R;
    return out;
}

// Histogram of a long orbit of f, the direct-simulation reference for nu0.
template <IntervalMap M>
GridDensity birkhoff_histogram(const M& map, std::size_t bins, std::size_t iterates, std::uint64_t seed,
                               std::size_t orbits = 100, std::size_t burn_in = 1000, const Parallel& par = {})
{
    require(bins >= 1 && orbits >= 1 && iterates >= orbits, "Birkhoff histogram needs bins, orbits and iterates");
    const Interval I = map.domain();
    const double wI = I.length() / static_cast<double>(bins);
    std::vector<std::vector<double>> hist(orbits, std::vector<double>(bins, 0.0));
    const std::size_t per = iterates / orbits;
    const double c = map.split_point();
    par.each(orbits, [&](std::size_t o) {
        Rng rng(derive_seed(seed, o));
        double x = rng.uniform(I.lo, I.hi);
        for (std::size_t t = 0; t < burn_in + per; ++t) {
            if (x == c)
                x = rng.uniform(I.lo, I.hi);
            if (t >= burn_in) {
                auto k = static_cast<long>((x - I.lo) / wI);
                hist[o][static_cast<std::size_t>(std::clamp<long>(k, 0, static_cast<long>(bins) - 1))] += 1.0;
            }
            x = map.branch_eval_d(x < c ? 0 : 1, x);
        }
    }, 1);
    GridDensity d{I, std::vector<double>(bins, 0.0)};
    for (const auto& h : hist)
        for (std::size_t k = 0; k < bins; ++k)
            d.values[k] += h[k];
    d.normalize();
    return d;
}

}  // namespace glorenz

#endif
