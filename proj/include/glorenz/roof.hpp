#ifndef GLORENZ_ROOF_HPP
#define GLORENZ_ROOF_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "core.hpp"
#include "lorenz_map.hpp"
#include "parallel.hpp"
#include "partition.hpp"
#include "stats.hpp"
#include "transfer.hpp"

namespace glorenz {

// Return time to the section as a function of the leaf coordinate:
// -log|x| / lambda1 + s(x), s a constant plus an optional C^2 bump.
// `constant` replaces the whole thing by a fixed value (negative control).
struct RoofFunction {
    double lambda1 = 1.0;
    double s0 = 1.0;
    double bump_eps = 0.0;  // s(x) = s0 + eps (1 - u^2)^3, u = (x - center) / width
    double bump_center = 0.25;
    double bump_width = 0.1;
    bool constant = false;
    double constant_value = 1.0;

    static RoofFunction constant_roof(double v)
    {
        RoofFunction r;
        r.constant = true;
        r.constant_value = v;
        return r;
    }

    double r0() const { return kLn2 / lambda1; }

    std::vector<std::string> violations() const
    {
        std::vector<std::string> v;
        if (!(lambda1 > 0.0))
            v.push_back("roof needs lambda1 > 0");
        if (constant) {
            if (!(constant_value >= r0()))
                v.push_back("constant roof must stay above log 2 / lambda1");
            return v;
        }
        if (!(bump_width > 0.0))
            v.push_back("roof bump width must be positive");
        if (!(s0 - std::abs(bump_eps) > 0.0))
            v.push_back("transit time s(x) must stay positive (s0 > |bump_eps|)");
        return v;
    }

    double s(double x) const
    {
        const double u = (x - bump_center) / bump_width;
        return std::abs(u) < 1.0 ? s0 + bump_eps * std::pow(1.0 - u * u, 3) : s0;
    }
    double ds(double x) const
    {
        const double u = (x - bump_center) / bump_width;
        return std::abs(u) < 1.0 ? bump_eps * -6.0 * u * (1.0 - u * u) * (1.0 - u * u) / bump_width : 0.0;
    }

    double eval(double x) const
    {
        if (constant)
            return constant_value;
        if (x == 0.0)
            throw SingularLeaf("roof is infinite on the singular leaf");
        return -std::log(std::abs(x)) / lambda1 + s(x);
    }
    double deriv(double x) const
    {
        if (constant)
            return 0.0;
        if (x == 0.0)
            throw SingularLeaf("roof derivative undefined on the singular leaf");
        return -1.0 / (lambda1 * x) + ds(x);
    }
    // smallest value on I minus {0}
    double infimum() const
    {
        if (constant)
            return constant_value;
        double smin = s0;
        if (bump_eps < 0.0)
            smin = s0 + bump_eps;
        return std::log(2.0) / lambda1 + smin;
    }
};

// Pinching constants xi1 <= -x D rho(x) <= xi2 over a log-spaced sample of |x|.
struct Pinching {
    double xi1 = 0.0, xi2 = 0.0;
};

inline Pinching measure_pinching(const RoofFunction& rf, std::size_t samples = 100000)
{
    require(samples >= 2, "pinching needs at least two samples");
    Pinching p{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    for (std::size_t i = 0; i < samples; ++i) {
        // |x| from 1e-12 to 1/2, both signs, plus the bump's support
        const double u = static_cast<double>(i) / static_cast<double>(samples - 1);
        const double ax = 0.5 * std::pow(2e-12, 1.0 - u);
        for (double x : {ax, -ax, rf.bump_center + rf.bump_width * (2.0 * u - 1.0)}) {
            if (x == 0.0 || std::abs(x) > 0.5)
                continue;
            const double v = -x * rf.deriv(x);
            p.xi1 = std::min(p.xi1, v);
            p.xi2 = std::max(p.xi2, v);
        }
    }
    return p;
}

// r(x) = sum_{j < R} rho(f^j x) for x in a certified cell.
template <IntervalMap M>
double eval_roof(const RoofFunction& rf, const M& map, const Cell& c, double x)
{
    double r = 0.0;
    for (int j = 0; j < c.R; ++j) {
        r += rf.eval(x);
        x = map.branch_eval_d(c.branch(j), x);
    }
    return r;
}

template <IntervalMap M>
double eval_roof(const RoofFunction& rf, const M& map, const MarkovPartition& part, double x)
{
    const long i = part.find(x);
    if (i < 0)
        throw UnresolvedPoint("x = " + fmt17(x) + " is not inside a certified cell");
    return eval_roof(rf, map, part.cells[static_cast<std::size_t>(i)], x);
}

// Dr(x) and DF(x) along the cell's itinerary.
struct RoofJet {
    double r = 0.0;
    double dr = 0.0;
    double dF = 1.0;
};

template <IntervalMap M>
RoofJet roof_jet(const RoofFunction& rf, const M& map, const Cell& c, double x)
{
    RoofJet j;
    for (int i = 0; i < c.R; ++i) {
        j.r += rf.eval(x);
        j.dr += rf.deriv(x) * j.dF;
        const auto [fx, dfx] = branch_step(map, c.branch(i), x);
        j.dF *= dfx;
        x = fx;
    }
    return j;
}

// sup |D(r o h)| = sup |Dr / DF| over inverse branches, sampled at five points per
// cell, with cells taken shallowest first.
struct BranchDerivativeBound {
    std::vector<std::size_t> ladder;  // number of cells used
    std::vector<double> sup;          // running sup at each rung
    double sup_all = 0.0;
    double worst_ratio_to_envelope = 0.0;  // max of sample / (xi2/delta) sum sigma^{(1-b) i}
};

template <IntervalMap M>
BranchDerivativeBound branch_derivative_bound(const RoofFunction& rf, const M& map, const MarkovPartition& part,
                                              const std::vector<std::size_t>& ladder,
                                              const HyperbolicTimeConfig& hyp, double xi2, const Parallel& par = {})
{
    require(!part.cells.empty(), "branch derivative bound needs cells");
    std::vector<std::size_t> order(part.cells.size());
    for (std::size_t i = 0; i < order.size(); ++i)
        order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return part.cells[a].R < part.cells[b].R; });
    std::vector<double> best(order.size()), ratio(order.size());
    par.each(order.size(), [&](std::size_t k) {
        const Cell& c = part.cells[order[k]];
        const double lo = static_cast<double>(c.left), len = c.length();
        double env = 0.0;
        for (int i = 0; i < c.R; ++i)
            env += std::pow(hyp.sigma, (1.0 - hyp.b) * i);
        env *= xi2 / hyp.delta;
        double m = 0.0;
        for (double t : {1e-9, 0.25, 0.5, 0.75, 1.0 - 1e-9}) {
            const RoofJet j = roof_jet(rf, map, c, lo + t * len);
            m = std::max(m, std::abs(j.dr / j.dF));
        }
        best[k] = m;
        ratio[k] = m / env;
    }, 1024);
    BranchDerivativeBound out;
    double run = 0.0, worst = 0.0;
    std::size_t next = 0;
    std::vector<std::size_t> rungs = ladder;
    std::sort(rungs.begin(), rungs.end());
    for (std::size_t k = 0; k < order.size(); ++k) {
        run = std::max(run, best[k]);
        worst = std::max(worst, ratio[k]);
        while (next < rungs.size() && rungs[next] == k + 1) {
            out.ladder.push_back(rungs[next]);
            out.sup.push_back(run);
            ++next;
        }
    }
    out.sup_all = run;
    out.worst_ratio_to_envelope = worst;
    return out;
}

// nu(rho) = int rho phi over Delta; the log part is integrated exactly per bin.
inline double nu_of_roof(const RoofFunction& rf, const GridDensity& phi)
{
    if (rf.constant)
        return rf.constant_value * phi.integral();
    // antiderivative of -log|x|: x - x log|x|
    auto anti = [](double x) { return x == 0.0 ? 0.0 : x - x * std::log(std::abs(x)); };
    double s = 0.0;
    for (std::size_t i = 0; i < phi.bins(); ++i) {
        const double a = phi.edge(i), b = a + phi.width();
        double part = (anti(b) - anti(a)) / rf.lambda1;
        // s(x) by 8-point midpoint, exact for the constant part
        double ss = 0.0;
        for (int q = 0; q < 8; ++q)
            ss += rf.s(a + (q + 0.5) / 8.0 * (b - a));
        part += ss / 8.0 * (b - a);
        s += phi.values[i] * part;
    }
    return s;
}

struct RoofTail {
    std::vector<double> L;
    std::vector<double> cells_mass;  // Leb{r > L} among cells, as a fraction of |Delta|
    std::vector<double> total_mass;  // with unresolved mass counted where r > L is forced
    // split of cells_mass by inducing time: R > xi L, R0 <= R <= xi L, R < R0
    std::vector<double> big_R, mid_R, small_R;
    double xi = 0.0;
    int R0 = 0;
    LinearFit fit;
    double sigma0 = 0.0;
    double fit_from = 0.0, fit_to = 0.0;
};

// r on a cell is sampled at `per_cell` midpoints of equal sub-intervals, exact
// when r is constant on the cell.
template <IntervalMap M>
RoofTail roof_tail(const RoofFunction& rf, const M& map, const MarkovPartition& part, double nu_rho,
                   const std::vector<double>& L_grid, int R0 = 4, int per_cell = 4, const Parallel& par = {})
{
    require(nu_rho > 0.0 && per_cell >= 1 && !L_grid.empty(), "roof tail needs nu(rho) > 0, samples and a grid");
    if (part.cells.empty())
        throw FitUnreliable("empty partition");
    RoofTail t;
    t.L = L_grid;
    t.xi = 1.0 / (2.0 * nu_rho);
    t.R0 = R0;
    const std::size_t G = L_grid.size();
    const std::size_t block = 4096;
    const std::size_t nb = (part.cells.size() + block - 1) / block;
    struct Acc {
        std::vector<double> all, big, mid, small;
    };
    std::vector<Acc> acc(nb);
    par.blocks(part.cells.size(), block, [&](std::size_t b, std::size_t lo, std::size_t hi) {
        Acc& a = acc[b];
        a.all.assign(G, 0.0);
        a.big.assign(G, 0.0);
        a.mid.assign(G, 0.0);
        a.small.assign(G, 0.0);
        for (std::size_t ci = lo; ci < hi; ++ci) {
            const Cell& c = part.cells[ci];
            const double w = c.length() / per_cell;
            for (int q = 0; q < per_cell; ++q) {
                const double r = eval_roof(rf, map, c, static_cast<double>(c.left) + (q + 0.5) * w);
                for (std::size_t g = 0; g < G; ++g) {
                    if (!(r > L_grid[g]))
                        continue;
                    a.all[g] += w;
                    if (c.R > t.xi * L_grid[g])
                        a.big[g] += w;
                    else if (c.R >= R0)
                        a.mid[g] += w;
                    else
                        a.small[g] += w;
                }
            }
        }
    });
    const double D = part.delta.length();
    t.cells_mass.assign(G, 0.0);
    t.big_R.assign(G, 0.0);
    t.mid_R.assign(G, 0.0);
    t.small_R.assign(G, 0.0);
    for (const auto& a : acc)
        for (std::size_t g = 0; g < G; ++g) {
            t.cells_mass[g] += a.all[g] / D;
            t.big_R[g] += a.big[g] / D;
            t.mid_R[g] += a.mid[g] / D;
            t.small_R[g] += a.small[g] / D;
        }
    // unresolved points have R > depth_reached, uncertified ones R >= depth_reached
    const double rmin = rf.infimum();
    t.total_mass = t.cells_mass;
    for (std::size_t g = 0; g < G; ++g) {
        if (L_grid[g] < (part.depth_reached + 1) * rmin)
            t.total_mass[g] += part.unresolved / D;
        if (L_grid[g] < part.depth_reached * rmin)
            t.total_mass[g] += part.uncertified / D;
    }
    // fit where the tail has started and unresolved mass cannot hide above L
    double rlow = std::numeric_limits<double>::infinity();
    int Rmin = std::numeric_limits<int>::max();
    for (const auto& c : part.cells)
        Rmin = std::min(Rmin, c.R);
    rlow = Rmin * rmin;
    t.fit_from = rlow;
    t.fit_to = part.depth_reached * rmin;
    std::vector<double> xs, ys;
    for (std::size_t g = 0; g < G; ++g)
        if (L_grid[g] >= t.fit_from && L_grid[g] < t.fit_to && t.total_mass[g] > 0.0) {
            xs.push_back(L_grid[g]);
            ys.push_back(std::log(t.total_mass[g]));
        }
    if (xs.size() < 5)
        throw FitUnreliable("fewer than 5 roof tail points in [" + fmt17(t.fit_from) + ", " + fmt17(t.fit_to) + ")");
    t.fit = linear_fit(xs, ys);
    t.sigma0 = -t.fit.slope;
    return t;
}

inline void write_roof_tail_csv(std::ostream& os, const RoofTail& t)
{
    os << "L,mass,total_mass,mass_R_big,mass_R_mid,mass_R_small\n";
    for (std::size_t g = 0; g < t.L.size(); ++g)
        os << fmt17(t.L[g]) << ',' << fmt17(t.cells_mass[g]) << ',' << fmt17(t.total_mass[g]) << ','
           << fmt17(t.big_R[g]) << ',' << fmt17(t.mid_R[g]) << ',' << fmt17(t.small_R[g]) << '\n';
}

// ---- non-integrability probe ------------------------------------------------

struct UniPoint {
    int n = 0;
    double y = 0.0;        // F(x_n)
    double x = 0.0;        // x_n in the chosen cell
    double residual = 0.0; // |F(x_n) - y|
    int R = 0;             // inducing time of the cell containing y
    double dr = 0.0;       // Dr(F(x_n))
    double dF = 0.0;       // DF(F(x_n))
    double Q = 0.0;        // min over |c| <= C0 of |Dr - c DF|
};

struct UniProbe {
    std::vector<UniPoint> points;
    std::size_t burn_in = 0;
    bool strictly_increasing = false;
    double rank_corr = 0.0;     // Spearman of Q against -log y past burn-in
    double growth = 0.0;        // Q(y = 1e-6) / Q(y = 1e-3)
    double ratio_slope = 0.0;   // log |Dr/DF| against log y
    bool diverges = false;
};

inline UniProbe uni_verdict(std::vector<UniPoint> pts, std::size_t burn_in, double min_corr = 0.99,
                            double min_growth = 10.0)
{
    UniProbe p;
    p.points = std::move(pts);
    p.burn_in = std::min(burn_in, p.points.size());
    p.strictly_increasing = p.points.size() >= p.burn_in + 2;
    for (std::size_t i = p.burn_in + 1; i < p.points.size(); ++i)
        p.strictly_increasing = p.strictly_increasing && p.points[i].Q > p.points[i - 1].Q;
    std::vector<double> q, ly, lr, lyy;
    double q3 = std::numeric_limits<double>::quiet_NaN(), q6 = q3;
    for (std::size_t i = 0; i < p.points.size(); ++i) {
        const auto& u = p.points[i];
        if (i >= p.burn_in) {
            q.push_back(u.Q);
            ly.push_back(-std::log(u.y));
        }
        if (std::abs(u.y - 1e-3) <= 1e-3 * 1e-9)
            q3 = u.Q;
        if (std::abs(u.y - 1e-6) <= 1e-6 * 1e-9)
            q6 = u.Q;
        if (u.dr != 0.0) {
            lr.push_back(std::log(std::abs(u.dr / u.dF)));
            lyy.push_back(std::log(u.y));
        }
    }
    if (q.size() >= 2)
        p.rank_corr = spearman(q, ly);
    p.growth = q3 > 0.0 ? q6 / q3 : 0.0;
    if (lr.size() >= 2)
        p.ratio_slope = linear_fit(lyy, lr).slope;
    p.diverges = p.strictly_increasing && p.rank_corr >= min_corr && p.growth >= min_growth;
    return p;
}

// x_n = h(y_n) in cell `cell_index`, y_n = 10^{-n/2} for n = 2..seq_len,
// keeping the y_n inside Delta.
template <IntervalMap M>
UniProbe uni_divergence_probe(const RoofFunction& rf, const M& map, const MarkovPartition& part, double C0,
                              int seq_len, std::size_t cell_index, std::size_t burn_in = 0)
{
    require(C0 >= 0.0 && seq_len >= 2 && cell_index < part.cells.size(), "UNI probe needs C0 >= 0, seq_len >= 2 and a cell");
    const Cell& w = part.cells[cell_index];
    std::vector<UniPoint> pts;
    for (int n = 2; n <= seq_len; ++n) {
        UniPoint u;
        u.n = n;
        u.y = std::pow(10.0, -0.5 * n);
        if (!(u.y < part.delta.hi))
            continue;  // n = 2 sits on the boundary of the default Delta
        const long yi = part.find(u.y);
        if (yi < 0)
            throw SequenceDegenerate("F(x_n) = " + fmt17(u.y) + " (n = " + std::to_string(n) +
                                     ") falls outside the certified cells");
        u.x = static_cast<double>(induced_inverse(map, w, static_cast<long double>(u.y)));
        u.residual = std::abs(static_cast<double>(induced_eval_ld(map, w, static_cast<long double>(u.x))) - u.y);
        const Cell& wn = part.cells[static_cast<std::size_t>(yi)];
        u.R = wn.R;
        const RoofJet j = roof_jet(rf, map, wn, u.y);
        u.dr = j.dr;
        u.dF = j.dF;
        u.Q = std::max(0.0, std::abs(j.dr) - C0 * std::abs(j.dF));
        pts.push_back(u);
    }
    return uni_verdict(std::move(pts), burn_in);
}

inline void write_uni_csv(std::ostream& os, const UniProbe& p)
{
    os << "n,F_xn,x_n,R,Dr,DF,Dr_over_DF,Q\n";
    for (const auto& u : p.points)
        os << u.n << ',' << fmt17(u.y) << ',' << fmt17(u.x) << ',' << u.R << ',' << fmt17(u.dr) << ','
           << fmt17(u.dF) << ',' << fmt17(u.dr / u.dF) << ',' << fmt17(u.Q) << '\n';
}

}  // namespace glorenz

#endif
