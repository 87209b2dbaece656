#ifndef GLORENZ_PARTITION_HPP
#define GLORENZ_PARTITION_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "core.hpp"
#include "hyperbolic.hpp"
#include "lorenz_map.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "stats.hpp"

namespace glorenz {

inline constexpr int kMaxDepth = 63;

// One branch of the induced map: f^R maps (left, right) increasingly onto Delta.
// Bit i of `itin` is the branch used at step i.
struct Cell {
    long double left = 0.0L;  // extended so f^R(end) stays within the residual tolerance at large DF
    long double right = 0.0L;
    std::uint64_t itin = 0;
    int R = 0;
    int n_hyp = -1;  // hyperbolic time used by the certificate (-1 after reload)

    double length() const { return static_cast<double>(right - left); }
    int branch(int i) const { return static_cast<int>((itin >> i) & 1u); }
};

struct MarkovPartition {
    Interval delta;
    std::vector<Cell> cells;  // sorted by left end
    double kappa = 0.0;       // min |DF| seen during certification
    double covered = 0.0;     // Lebesgue masses, absolute
    double unresolved = 0.0;  // refinement stopped before a return
    double uncertified = 0.0; // carved but failed residual / monotonicity
    int depth_reached = 0;
    int finish_depth = 8;
    double delta1 = 0.0;      // smallest half-length of f^n(cell) at its hyperbolic time

    double coverage() const { return covered / delta.length(); }

    // Index of the cell containing x, or -1.
    long find(double x) const
    {
        auto it = std::upper_bound(cells.begin(), cells.end(), x, [](double v, const Cell& c) { return v < c.left; });
        if (it == cells.begin())
            return -1;
        --it;
        return (x > it->left && x < it->right) ? static_cast<long>(it - cells.begin()) : -1;
    }

    std::vector<double> cumulative_mass() const
    {
        std::vector<double> cum(cells.size() + 1, 0.0);
        for (std::size_t i = 0; i < cells.size(); ++i)
            cum[i + 1] = cum[i] + cells[i].length();
        return cum;
    }
};

// ---- evaluation along a cell's itinerary ----------------------------------

template <IntervalMap M>
long double induced_eval_ld(const M& m, const Cell& c, long double x)
{
    for (int i = 0; i < c.R; ++i)
        x = m.branch_eval(c.branch(i), x);
    return x;
}

template <IntervalMap M>
double induced_eval(const M& m, const Cell& c, double x)
{
    for (int i = 0; i < c.R; ++i)
        x = m.branch_eval_d(c.branch(i), x);
    return x;
}

// Inverse branch h: Delta -> cell.
template <IntervalMap M>
long double induced_inverse(const M& m, const Cell& c, long double y)
{
    for (int i = c.R - 1; i >= 0; --i)
        y = m.branch_inverse(c.branch(i), y);
    return y;
}

struct Jet {
    double value = 0.0;
    double d1 = 1.0;
    double d2 = 0.0;
};

// F, DF and D^2F by the chain rule.
template <IntervalMap M>
Jet induced_jet(const M& m, const Cell& c, double x)
{
    Jet j{x, 1.0, 0.0};
    for (int i = 0; i < c.R; ++i) {
        const int b = c.branch(i);
        const double df = m.branch_deriv(b, j.value), d2f = m.branch_deriv2(b, j.value);
        j.d2 = d2f * j.d1 * j.d1 + df * j.d2;
        j.d1 *= df;
        j.value = m.branch_eval_d(b, j.value);
    }
    return j;
}

template <IntervalMap M>
double induced_deriv(const M& m, const Cell& c, double x)
{
    double d = 1.0;
    for (int i = 0; i < c.R; ++i) {
        const auto [fv, dv] = branch_step(m, c.branch(i), x);
        d *= dv;
        x = fv;
    }
    return d;
}

inline std::string itinerary_string(const Cell& c)
{
    std::string s(static_cast<std::size_t>(c.R), 'L');
    for (int i = 0; i < c.R; ++i)
        if (c.branch(i))
            s[static_cast<std::size_t>(i)] = 'R';
    return s;
}

// ---- construction -----------------------------------------------------------

struct PartitionConfig {
    HyperbolicTimeConfig hyp;
    Interval delta{-0.1, 0.1};
    int depth_cap = 40;
    double mass_target = 0.999;
    int finish_depth = 8;        // N: at most this many steps after the hyperbolic time
    int monotone_samples = 100;  // interior points checked per cell
    double residual_tol = 1e-8;
    bool allow_shortfall = false;

    std::vector<std::string> violations() const
    {
        std::vector<std::string> v;
        if (!(delta.lo < delta.hi))
            v.push_back("Delta must be a nonempty interval");
        if (depth_cap < 1 || depth_cap > kMaxDepth)
            v.push_back("depth_cap must lie in [1, 63]");
        if (!(mass_target > 0.0 && mass_target < 1.0))
            v.push_back("mass_target must lie in (0,1)");
        if (finish_depth < 1)
            v.push_back("finish depth N must be >= 1");
        if (monotone_samples < 2)
            v.push_back("need at least 2 monotonicity samples per cell");
        return v;
    }
};

namespace detail {

struct Piece {
    std::uint64_t itin;
    long double lo, hi;  // image f^j(J)
};

inline std::uint64_t bit(int b, int j) { return static_cast<std::uint64_t>(b) << j; }

// Double precision is enough for mass bookkeeping.
template <IntervalMap M>
double pullback(const M& m, std::uint64_t itin, int j, double y)
{
    for (int i = j - 1; i >= 0; --i)
        y = branch_inverse_fast(m, static_cast<int>((itin >> i) & 1u), y);
    return y;
}

struct CarveResult {
    bool carved = false;
    bool certified = false;
    Cell cell;
    double kappa = std::numeric_limits<double>::infinity();
    double half_hyp = 0.0;
};

// Hyperbolic sandwich for the candidate h(Delta) at depth j: find k in [1, N]
// with n = j - k a hyperbolic time for every point of the candidate and
// f^i(candidate) outside Delta for max(n,1) <= i < j. Worst cases come from the
// endpoints of f^i(candidate), since |Df| and the distance to the singular
// point are monotone on each side.
template <IntervalMap M>
CarveResult try_carve(const M& m, const PartitionConfig& cfg, std::uint64_t itin, int j)
{
    CarveResult res;
    std::vector<long double> yl(j + 1), yr(j + 1);
    yl[j] = cfg.delta.lo;
    yr[j] = cfg.delta.hi;
    for (int i = j - 1; i >= 0; --i) {
        const int b = static_cast<int>((itin >> i) & 1u);
        yl[i] = m.branch_inverse(b, yl[i + 1]);
        yr[i] = m.branch_inverse(b, yr[i + 1]);
    }
    const double c = m.split_point();
    const double cs = -std::log(cfg.hyp.sigma);
    // prefix maxima of both clauses
    std::vector<double> ok_deriv(j + 1), wait(j + 1);
    double sum = 0.0, best = -std::numeric_limits<double>::infinity(), w = -std::numeric_limits<double>::infinity();
    std::vector<double> psum(j + 1, 0.0);
    ok_deriv[0] = 1.0;
    wait[0] = 0.0;
    for (int i = 0; i < j; ++i) {
        const int b = static_cast<int>((itin >> i) & 1u);
        const double a = static_cast<double>(yl[i]), z = static_cast<double>(yr[i]);
        const double dmin = std::min(m.branch_deriv(b, a), m.branch_deriv(b, z));
        double dist = std::min(std::abs(a - c), std::abs(z - c));
        if (a < c && c < z)
            dist = 0.0;
        best = std::max(best, sum - i * cs);
        w = std::max(w, i + recurrence_wait(dist, cfg.hyp));
        sum += std::log(dmin);
        const int n = i + 1;
        ok_deriv[n] = (sum - n * cs >= best - 1e-12 * (1.0 + std::abs(sum))) ? 1.0 : 0.0;
        wait[n] = w;
    }
    int last_hit = -1;
    for (int i = 1; i < j; ++i)
        if (yl[i] < cfg.delta.hi && yr[i] > cfg.delta.lo)
            last_hit = i;
    for (int k = 1; k <= std::min(cfg.finish_depth, j); ++k) {
        const int n = j - k;
        if (n > 0 && (ok_deriv[n] == 0.0 || static_cast<double>(n) < wait[n]))
            continue;
        if (last_hit >= std::max(n, 1))
            continue;
        res.carved = true;
        res.cell.left = yl[0];
        res.cell.right = yr[0];
        res.cell.itin = itin;
        res.cell.R = j;
        res.cell.n_hyp = n;
        res.half_hyp = static_cast<double>(yr[n] - yl[n]) / 2.0;
        break;
    }
    if (!res.carved)
        return res;

    // Certification: endpoint residuals in extended precision, then interior
    // monotonicity and expansion on a uniform sample.
    Cell& cell = res.cell;
    if (!(cell.left < cell.right))
        return res;
    const long double fl = induced_eval_ld(m, cell, cell.left), fr = induced_eval_ld(m, cell, cell.right);
    if (std::abs(static_cast<double>(fl - cfg.delta.lo)) > cfg.residual_tol ||
        std::abs(static_cast<double>(fr - cfg.delta.hi)) > cfg.residual_tol)
        return res;
    // all samples advance together: independent pow calls pipeline well
    const int S = cfg.monotone_samples;
    std::vector<double> v(static_cast<std::size_t>(S)), d(static_cast<std::size_t>(S), 1.0);
    for (int s = 0; s < S; ++s) {
        v[s] = static_cast<double>(cell.left + (s + 0.5L) / S * (cell.right - cell.left));
        if (!(v[s] > cell.left && v[s] < cell.right))
            return res;
    }
    for (int i = 0; i < cell.R; ++i) {
        const int b = cell.branch(i);
        for (int s = 0; s < S; ++s) {
            const auto [fv, dv] = branch_step(m, b, v[s]);
            d[s] *= dv;
            v[s] = fv;
        }
    }
    double prev = cfg.delta.lo - cfg.residual_tol, kap = std::numeric_limits<double>::infinity();
    for (int s = 0; s < S; ++s) {
        if (!(v[s] > prev) || v[s] > cfg.delta.hi + cfg.residual_tol)
            return res;
        prev = v[s];
        kap = std::min(kap, d[s]);
    }
    if (!(kap > 1.0))
        return res;
    res.kappa = kap;
    res.certified = true;
    return res;
}

}  // namespace detail

template <IntervalMap M>
MarkovPartition build_partition(const M& m, const PartitionConfig& cfg, const Parallel& par = {})
{
    {
        auto v = cfg.violations();
        if (!v.empty())
            throw ValidationError("partition config: " + v.front());
    }
    using detail::Piece;
    MarkovPartition part;
    part.delta = cfg.delta;
    part.finish_depth = cfg.finish_depth;
    part.kappa = std::numeric_limits<double>::infinity();
    part.delta1 = std::numeric_limits<double>::infinity();
    const double c = m.split_point();
    const Interval dom = m.domain();
    const double target = cfg.mass_target * cfg.delta.length();

    std::vector<Piece> pieces{{0, cfg.delta.lo, cfg.delta.hi}};
    std::vector<Cell> cells;
    double covered = 0.0, uncertified = 0.0;

    struct BlockOut {
        std::vector<Cell> cells;
        std::vector<Piece> next;
        double covered = 0.0, uncertified = 0.0;
        double kappa = std::numeric_limits<double>::infinity();
        double delta1 = std::numeric_limits<double>::infinity();
    };

    int j = 0;
    bool done = false;
    for (; j <= cfg.depth_cap && !done; ++j) {
        const std::size_t block = 2048;
        std::vector<BlockOut> outs((pieces.size() + block - 1) / block);
        const bool last_level = j == cfg.depth_cap;
        par.blocks(pieces.size(), block, [&](std::size_t bi, std::size_t lo, std::size_t hi) {
            BlockOut& o = outs[bi];
            for (std::size_t pi = lo; pi < hi; ++pi) {
                const Piece& p = pieces[pi];
                Piece segs[2];
                int nseg = 0;
                bool keep_whole = true;
                if (j >= 1 && p.lo <= cfg.delta.lo && p.hi >= cfg.delta.hi) {
                    auto r = detail::try_carve(m, cfg, p.itin, j);
                    if (r.carved) {
                        keep_whole = false;
                        if (r.certified) {
                            o.cells.push_back(r.cell);
                            o.covered += r.cell.length();
                            o.kappa = std::min(o.kappa, r.kappa);
                            o.delta1 = std::min(o.delta1, r.half_hyp);
                        } else {
                            o.uncertified += std::max(0.0, r.cell.length());
                        }
                        if (p.lo < cfg.delta.lo)
                            segs[nseg++] = {p.itin, p.lo, cfg.delta.lo};
                        if (p.hi > cfg.delta.hi)
                            segs[nseg++] = {p.itin, cfg.delta.hi, p.hi};
                    }
                }
                if (keep_whole)
                    segs[nseg++] = p;
                if (last_level) {
                    for (int s = 0; s < nseg; ++s)
                        o.next.push_back(segs[s]);
                    continue;
                }
                for (int s = 0; s < nseg; ++s) {
                    const Piece& q = segs[s];
                    for (int b = 0; b < 2; ++b) {
                        const long double l = std::max<long double>(q.lo, b == 0 ? dom.lo : c);
                        const long double h = std::min<long double>(q.hi, b == 0 ? c : dom.hi);
                        if (!(l < h))
                            continue;
                        o.next.push_back({q.itin | detail::bit(b, j), m.branch_eval(b, l), m.branch_eval(b, h)});
                    }
                }
            }
        });
        std::vector<Piece> next;
        for (auto& o : outs) {
            cells.insert(cells.end(), o.cells.begin(), o.cells.end());
            next.insert(next.end(), o.next.begin(), o.next.end());
            covered += o.covered;
            uncertified += o.uncertified;
            part.kappa = std::min(part.kappa, o.kappa);
            part.delta1 = std::min(part.delta1, o.delta1);
        }
        part.depth_reached = j;
        pieces.swap(next);
        if (covered >= target || last_level)
            done = true;
    }

    // What is left was never carved. Children of level j live at depth j+1,
    // unless the cap stopped us, in which case they are still at depth j.
    const int piece_depth = (covered >= target && part.depth_reached < cfg.depth_cap) ? part.depth_reached + 1
                                                                                     : part.depth_reached;
    std::vector<double> lost(pieces.size());
    par.each(pieces.size(), [&](std::size_t i) {
        const auto& p = pieces[i];
        lost[i] = detail::pullback(m, p.itin, piece_depth, static_cast<double>(p.hi)) -
                  detail::pullback(m, p.itin, piece_depth, static_cast<double>(p.lo));
    });
    double unresolved = 0.0;
    for (double v : lost)
        unresolved += std::abs(v);

    std::sort(cells.begin(), cells.end(), [](const Cell& a, const Cell& b) { return a.left < b.left; });
    part.cells = std::move(cells);
    part.covered = covered;
    part.uncertified = uncertified;
    part.unresolved = unresolved;
    if (part.cells.empty())
        part.kappa = 0.0;
    if (covered < target && !cfg.allow_shortfall)
        throw CoverageShortfall("depth cap " + std::to_string(cfg.depth_cap) + " reached with coverage " +
                                    fmt17(part.coverage()) + " < target " + fmt17(cfg.mass_target),
                                part.coverage());
    return part;
}

// ---- serialization ----------------------------------------------------------

// 21 significant digits round-trip the extended endpoints exactly.
inline std::string fmt21(long double v)
{
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.21Lg", v);
    return buf;
}

inline void write_partition(std::ostream& os, const MarkovPartition& p)
{
    os << "# delta " << fmt17(p.delta.lo) << ' ' << fmt17(p.delta.hi) << '\n';
    os << "# covered " << fmt17(p.covered) << '\n';
    os << "# unresolved " << fmt17(p.unresolved) << '\n';
    os << "# uncertified " << fmt17(p.uncertified) << '\n';
    os << "# kappa " << fmt17(p.kappa) << '\n';
    os << "# depth_reached " << p.depth_reached << '\n';
    os << "# finish_depth " << p.finish_depth << '\n';
    os << "# delta1 " << fmt17(p.delta1) << '\n';
    os << "# left right R itinerary\n";
    for (const auto& c : p.cells)
        os << fmt21(c.left) << ' ' << fmt21(c.right) << ' ' << c.R << ' ' << itinerary_string(c) << '\n';
}

inline MarkovPartition read_partition(std::istream& is)
{
    MarkovPartition p;
    std::string line;
    long lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty())
            continue;
        std::istringstream ss(line);
        if (line[0] == '#') {
            std::string hash, key;
            ss >> hash >> key;
            if (key == "delta")
                ss >> p.delta.lo >> p.delta.hi;
            else if (key == "covered")
                ss >> p.covered;
            else if (key == "unresolved")
                ss >> p.unresolved;
            else if (key == "uncertified")
                ss >> p.uncertified;
            else if (key == "kappa")
                ss >> p.kappa;
            else if (key == "depth_reached")
                ss >> p.depth_reached;
            else if (key == "finish_depth")
                ss >> p.finish_depth;
            else if (key == "delta1")
                ss >> p.delta1;
            continue;
        }
        Cell c;
        std::string lt, rt, it;
        if (!(ss >> lt >> rt >> c.R >> it) || static_cast<int>(it.size()) != c.R || c.R > kMaxDepth)
            throw ParseError("partition line " + std::to_string(lineno) + ": malformed cell");
        c.left = std::strtold(lt.c_str(), nullptr);
        c.right = std::strtold(rt.c_str(), nullptr);
        for (int i = 0; i < c.R; ++i) {
            if (it[static_cast<std::size_t>(i)] == 'R')
                c.itin |= std::uint64_t{1} << i;
            else if (it[static_cast<std::size_t>(i)] != 'L')
                throw ParseError("partition line " + std::to_string(lineno) + ": bad itinerary symbol");
        }
        p.cells.push_back(c);
    }
    return p;
}

// ---- tail of the inducing time ---------------------------------------------

struct TailTable {
    std::vector<int> n;
    std::vector<double> cells_mass;  // mass{R > n} among certified cells, as a fraction of |Delta|
    std::vector<double> total_mass;  // same, counting unresolved/uncertified mass as R > n
    LinearFit fit;                   // log total_mass vs n over the resolved range
    double gamma = 0.0;              // decay rate, -slope
    int fit_from = 0, fit_to = 0;
};

inline TailTable tail_histogram_R(const MarkovPartition& part)
{
    if (part.cells.empty())
        throw FitUnreliable("empty partition");
    int rmax = 0, rmin = std::numeric_limits<int>::max();
    for (const auto& c : part.cells) {
        rmax = std::max(rmax, c.R);
        rmin = std::min(rmin, c.R);
    }
    std::vector<double> mass_at(static_cast<std::size_t>(rmax) + 1, 0.0);
    std::vector<char> seen(static_cast<std::size_t>(rmax) + 1, 0);
    for (const auto& c : part.cells) {
        mass_at[static_cast<std::size_t>(c.R)] += c.length();
        seen[static_cast<std::size_t>(c.R)] = 1;
    }
    int distinct = 0;
    for (char s : seen)
        distinct += s;
    const double L = part.delta.length();
    TailTable t;
    const int top = std::max(rmax, part.depth_reached);
    double above = 0.0;
    std::vector<double> cm(static_cast<std::size_t>(top) + 1);
    for (int n = top; n >= 0; --n) {
        cm[static_cast<std::size_t>(n)] = above;
        if (n <= rmax)
            above += mass_at[static_cast<std::size_t>(n)];
    }
    for (int n = 0; n <= top; ++n) {
        t.n.push_back(n);
        t.cells_mass.push_back(cm[static_cast<std::size_t>(n)] / L);
        // never-carved mass has R > depth_reached; uncertified cells returned earlier
        double extra = n <= part.depth_reached ? part.unresolved : 0.0;
        if (n < part.depth_reached)
            extra += part.uncertified;
        t.total_mass.push_back((cm[static_cast<std::size_t>(n)] + extra) / L);
    }
    if (distinct < 5)
        throw FitUnreliable("only " + std::to_string(distinct) + " distinct inducing times");
    std::vector<double> xs, ys;
    t.fit_from = rmin;
    t.fit_to = std::max(rmin, part.depth_reached - 1);
    for (int n = t.fit_from; n <= t.fit_to; ++n)
        if (t.total_mass[static_cast<std::size_t>(n)] > 0.0) {
            xs.push_back(n);
            ys.push_back(std::log(t.total_mass[static_cast<std::size_t>(n)]));
        }
    if (xs.size() < 5)
        throw FitUnreliable("fewer than 5 tail points");
    t.fit = linear_fit(xs, ys);
    t.gamma = -t.fit.slope;
    return t;
}

// ---- distortion and Renyi reports -------------------------------------------

struct DistortionReport {
    std::vector<int> n;
    std::vector<double> B0;     // sup |log DF^n(hx) - log DF^n(hy)| / |x - y|
    double one_step_c = 0.0;    // sup |DF(x)/DF(y) - 1| / |F(x) - F(y)| inside single cells
    double one_step_ratio = 0.0;  // sup DF(x)/DF(y) inside single cells
};

namespace detail {

// Sample s uses cell (s/4) mod #cells. Mode s%4 = 0 draws a spread pair; the
// others put a close pair near the left end, the middle and the right end,
// where the sup usually sits.
inline std::pair<double, double> distortion_pair(std::size_t s, Rng& rng, double lo, double hi)
{
    const double len = hi - lo;
    const int mode = static_cast<int>(s % 4);
    if (mode == 0)
        return {rng.uniform(lo, hi), rng.uniform(lo, hi)};
    const double t = mode == 1 ? 1e-3 : mode == 2 ? 0.5 : 1.0 - 1e-3;
    const double x = lo + t * len;
    const double y = std::clamp(x + rng.uniform(-1e-4, 1e-4) * len, lo + 1e-6 * len, hi - 1e-6 * len);
    return {x, y};
}

}  // namespace detail

// Branches h in H_n are chains of n cells. The cell applied first to x
// dominates the log-distortion, so it walks through the cells in order; the
// rest of the chain is drawn uniformly by index.
template <IntervalMap M>
DistortionReport distortion_report(const M& m, const MarkovPartition& part, std::size_t pair_samples,
                                   const std::vector<int>& n_set, std::uint64_t seed, const Parallel& par = {})
{
    require(pair_samples >= 1 && !part.cells.empty(), "distortion report needs samples and cells");
    const Interval D = part.delta;
    const std::uint64_t ncells = part.cells.size();
    DistortionReport rep;
    for (std::size_t k = 0; k < n_set.size(); ++k) {
        const int n = n_set[k];
        std::vector<double> vals(pair_samples, 0.0);
        par.each(pair_samples, [&](std::size_t s) {
            Rng rng(derive_seed(seed + static_cast<std::uint64_t>(n) * 7919u, s));
            std::vector<std::size_t> chain(static_cast<std::size_t>(n));
            for (auto& ci : chain)
                ci = static_cast<std::size_t>(rng.below(ncells));
            chain.back() = (s / 4) % ncells;
            const auto [x, y] = detail::distortion_pair(s, rng, D.lo, D.hi);
            if (x == y)
                return;
            long double px = x, py = y;
            double lx = 0.0, ly = 0.0;
            for (int i = n - 1; i >= 0; --i) {
                const Cell& c = part.cells[chain[static_cast<std::size_t>(i)]];
                px = induced_inverse(m, c, px);
                py = induced_inverse(m, c, py);
                lx += std::log(induced_deriv(m, c, static_cast<double>(px)));
                ly += std::log(induced_deriv(m, c, static_cast<double>(py)));
            }
            vals[s] = std::abs(lx - ly) / std::abs(x - y);
        });
        rep.n.push_back(n);
        rep.B0.push_back(*std::max_element(vals.begin(), vals.end()));
    }
    std::vector<double> cvals(pair_samples, 0.0), rvals(pair_samples, 1.0);
    par.each(pair_samples, [&](std::size_t s) {
        Rng rng(derive_seed(seed ^ 0x5a5a5a5aULL, s));
        const Cell& c = part.cells[(s / 4) % ncells];
        const auto [x, y] = detail::distortion_pair(s, rng, static_cast<double>(c.left), static_cast<double>(c.right));
        if (!(x > c.left && x < c.right && y > c.left && y < c.right) || x == y)
            return;
        const Jet jx = induced_jet(m, c, x), jy = induced_jet(m, c, y);
        if (jx.value == jy.value)
            return;
        cvals[s] = std::abs(jx.d1 / jy.d1 - 1.0) / std::abs(jx.value - jy.value);
        rvals[s] = std::max(jx.d1 / jy.d1, jy.d1 / jx.d1);
    });
    rep.one_step_c = *std::max_element(cvals.begin(), cvals.end());
    rep.one_step_ratio = *std::max_element(rvals.begin(), rvals.end());
    return rep;
}

struct RenyiReport {
    double B = 0.0;                 // sup |D^2F| / (DF)^2 over sampled cell points
    std::vector<int> n;
    std::vector<double> n_step;     // sup |D^2F^n| / (DF^n)^2 along sampled orbits
    std::vector<double> envelope;   // B n sigma^(n-1)
    std::vector<char> within_envelope;
    double recursion_bound = 0.0;   // B / (1 - 1/kappa)
};

// The n-step ratio obeys A_{k+1} = rho(x_k) + A_k / DF(x_k), rho = D^2F / DF^2.
template <IntervalMap M>
RenyiReport renyi_report(const M& m, const MarkovPartition& part, std::size_t samples, const std::vector<int>& n_list,
                         double sigma, std::uint64_t seed, const Parallel& par = {})
{
    require(samples >= 1 && !part.cells.empty(), "Renyi report needs samples and cells");
    RenyiReport rep;
    // one-step sup: every cell when affordable, else cells drawn uniformly by
    // index so small cells near the singular point are not starved
    const std::size_t ncell = std::min(samples, part.cells.size());
    std::vector<double> one(ncell, 0.0);
    par.each(ncell, [&](std::size_t s) {
        std::size_t ci = s;
        if (ncell < part.cells.size()) {
            Rng rng(derive_seed(seed, s));
            ci = static_cast<std::size_t>(rng.below(part.cells.size()));
        }
        const Cell& c = part.cells[ci];
        for (long double t : {1e-3L, 0.5L, 1.0L - 1e-3L}) {
            const double x = static_cast<double>(c.left + t * (c.right - c.left));
            const Jet jt = induced_jet(m, c, x);
            one[s] = std::max(one[s], std::abs(jt.d2) / (jt.d1 * jt.d1));
        }
    });
    rep.B = *std::max_element(one.begin(), one.end());
    const int nmax = n_list.empty() ? 0 : *std::max_element(n_list.begin(), n_list.end());
    std::vector<std::vector<double>> per(samples, std::vector<double>(static_cast<std::size_t>(nmax) + 1, 0.0));
    par.each(samples, [&](std::size_t s) {
        Rng rng(derive_seed(seed ^ 0xabcdefULL, s));
        double x = rng.uniform(part.delta.lo, part.delta.hi), A = 0.0;
        for (int k = 1; k <= nmax; ++k) {
            const long ci = part.find(x);
            if (ci < 0) {
                for (int r = k; r <= nmax; ++r)
                    per[s][static_cast<std::size_t>(r)] = std::numeric_limits<double>::quiet_NaN();
                return;
            }
            const Jet jt = induced_jet(m, part.cells[static_cast<std::size_t>(ci)], x);
            A = jt.d2 / (jt.d1 * jt.d1) + A / jt.d1;
            per[s][static_cast<std::size_t>(k)] = std::abs(A);
            x = jt.value;
        }
    });
    for (int n : n_list) {
        double mx = 0.0;
        for (auto& row : per)
            if (!std::isnan(row[static_cast<std::size_t>(n)]))
                mx = std::max(mx, row[static_cast<std::size_t>(n)]);
        const double env = rep.B * n * std::pow(sigma, n - 1);
        rep.n.push_back(n);
        rep.n_step.push_back(mx);
        rep.envelope.push_back(env);
        rep.within_envelope.push_back(mx <= env);
    }
    rep.recursion_bound = part.kappa > 1.0 ? rep.B / (1.0 - 1.0 / part.kappa) : std::numeric_limits<double>::infinity();
    return rep;
}

}  // namespace glorenz

#endif
