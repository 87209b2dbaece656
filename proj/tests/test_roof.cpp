#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "glorenz/flow.hpp"
#include "glorenz/oracle_maps.hpp"
#include "glorenz/roof.hpp"

using namespace glorenz;

namespace {

MarkovPartition doubling_full()
{
    PartitionConfig cfg;
    cfg.delta = {-0.5, 0.5};
    cfg.depth_cap = 4;
    return build_partition(DoublingMap{}, cfg);
}

const MarkovPartition& lorenz_partition()
{
    static const MarkovPartition p = [] {
        PartitionConfig cfg;
        cfg.depth_cap = 20;
        cfg.allow_shortfall = true;
        return build_partition(LorenzMap1D{}, cfg);
    }();
    return p;
}

}  // namespace

TEST(Roof, SingleStepCellIsBaseRoof)
{
    DoublingMap d;
    const auto part = doubling_full();
    RoofFunction rf;
    for (double x : {-0.4, -0.1, 0.003, 0.3})
        EXPECT_DOUBLE_EQ(eval_roof(rf, d, part, x), -std::log(std::abs(x)) + 1.0);
}

TEST(Roof, TermwiseLowerBound)
{
    const auto& p = lorenz_partition();
    const LorenzMap1D m;
    const RoofFunction rf;
    Rng rng(3);
    double inf = std::numeric_limits<double>::infinity();
    int checked = 0;
    while (checked < 100000) {
        const double x = rng.uniform(p.delta.lo, p.delta.hi);
        const long i = p.find(x);
        if (i < 0)
            continue;
        const Cell& c = p.cells[static_cast<std::size_t>(i)];
        const double r = eval_roof(rf, m, c, x);
        if (checked < 10000)
            EXPECT_GE(r, c.R * std::log(2.0) / rf.lambda1);
        inf = std::min(inf, r);
        ++checked;
    }
    EXPECT_GE(inf, std::log(2.0) / rf.lambda1 - 1e-12);
}

TEST(Roof, MatchesFlowTimeBetweenReturns)
{
    const auto& p = lorenz_partition();
    const FlowParams fp;
    const RoofFunction rf{fp.lambda1, fp.s0};
    const LorenzMap1D m = fp.lorenz_map();
    Rng rng(9);
    int checked = 0;
    while (checked < 200) {
        const double x = rng.uniform(p.delta.lo, p.delta.hi);
        const long i = p.find(x);
        if (i < 0)
            continue;
        const Cell& c = p.cells[static_cast<std::size_t>(i)];
        const double r = eval_roof(rf, m, c, x);
        const auto tr = flow_trajectory(fp, {x, 0.0}, r + 5.0, 1.0);
        ASSERT_GE(tr.hit_times.size(), static_cast<std::size_t>(c.R));
        EXPECT_NEAR(tr.hit_times[static_cast<std::size_t>(c.R) - 1], r, 1e-6);
        // the R-th landing is back in Delta
        EXPECT_TRUE(p.delta.contains(tr.hits[static_cast<std::size_t>(c.R) - 1].x));
        ++checked;
    }
}

TEST(Roof, OutsideCellsThrows)
{
    PartitionConfig cfg;
    cfg.depth_cap = 6;
    cfg.allow_shortfall = true;
    const auto p = build_partition(LorenzMap1D{}, cfg);
    Rng rng(1);
    bool thrown = false;
    for (int t = 0; t < 1000 && !thrown; ++t) {
        const double x = rng.uniform(p.delta.lo, p.delta.hi);
        if (p.find(x) < 0) {
            EXPECT_THROW(eval_roof(RoofFunction{}, LorenzMap1D{}, p, x), UnresolvedPoint);
            thrown = true;
        }
    }
    EXPECT_TRUE(thrown);
}

TEST(Roof, PinchingConstants)
{
    RoofFunction rf;
    rf.lambda1 = 1.25;
    auto p = measure_pinching(rf);
    EXPECT_NEAR(p.xi1, 1.0 / rf.lambda1, 1e-12);
    EXPECT_NEAR(p.xi2, 1.0 / rf.lambda1, 1e-12);

    // a C^2 bump moves -x Ds(x) by at most |eps| sup|u (1-u^2)^2| 6 |x| / width
    rf.bump_eps = 0.01;
    p = measure_pinching(rf);
    const double bound = 0.01 * 6.0 * 0.4 * (rf.bump_center + rf.bump_width) / rf.bump_width;
    EXPECT_LT(p.xi1, 1.0 / rf.lambda1);
    EXPECT_GT(p.xi2, 1.0 / rf.lambda1);
    EXPECT_GE(p.xi1, 1.0 / rf.lambda1 - bound);
    EXPECT_LE(p.xi2, 1.0 / rf.lambda1 + bound);
    EXPECT_NEAR(p.xi1, 1.0 / rf.lambda1, 0.1 / rf.lambda1);
    EXPECT_NEAR(p.xi2, 1.0 / rf.lambda1, 0.1 / rf.lambda1);
}

TEST(Roof, BumpDerivativeMatchesDifferences)
{
    RoofFunction rf;
    rf.bump_eps = 0.3;
    for (double x : {0.17, 0.2, 0.26, 0.33, -0.2}) {
        const double h = 1e-6;
        EXPECT_NEAR(rf.deriv(x), (rf.eval(x + h) - rf.eval(x - h)) / (2 * h), 1e-6);
    }
    EXPECT_TRUE(rf.violations().empty());
    rf.bump_eps = 1.5;
    EXPECT_FALSE(rf.violations().empty());
}

TEST(BranchDerivative, ConstantRoofIsZero)
{
    DoublingMap d;
    PartitionConfig cfg;
    cfg.delta = {-0.5, 0.0};
    cfg.depth_cap = 20;
    const auto p = build_partition(d, cfg);
    const auto b = branch_derivative_bound(RoofFunction::constant_roof(1.0), d, p, {2, 5}, HyperbolicTimeConfig{}, 1.0);
    EXPECT_EQ(b.sup_all, 0.0);
}

TEST(BranchDerivative, ChainRuleMatchesDifferences)
{
    const auto& p = lorenz_partition();
    const LorenzMap1D m;
    const RoofFunction rf;
    int checked = 0;
    for (std::size_t i = 0; i < p.cells.size() && checked < 50; ++i) {
        const Cell& c = p.cells[i];
        if (c.R > 8)
            continue;
        // D(r o h)(y) by differences in y through the long-double inverse
        const long double y = 0.013L, h = 1e-7L;
        const double xp = static_cast<double>(induced_inverse(m, c, y + h));
        const double xm = static_cast<double>(induced_inverse(m, c, y - h));
        const double fd = (eval_roof(rf, m, c, xp) - eval_roof(rf, m, c, xm)) / static_cast<double>(2 * h);
        const RoofJet j = roof_jet(rf, m, c, static_cast<double>(induced_inverse(m, c, y)));
        EXPECT_NEAR(j.dr / j.dF, fd, 1e-5 * (1.0 + std::abs(fd)));
        ++checked;
    }
    EXPECT_GE(checked, 20);
}

TEST(BranchDerivative, LadderIsMonotoneAndUnderEnvelope)
{
    const auto& p = lorenz_partition();
    const RoofFunction rf;
    const auto pin = measure_pinching(rf);
    const auto b = branch_derivative_bound(rf, LorenzMap1D{}, p, {100, 1000, 3000}, HyperbolicTimeConfig{}, pin.xi2);
    ASSERT_EQ(b.sup.size(), 3u);
    EXPECT_LE(b.sup[0], b.sup[1]);
    EXPECT_LE(b.sup[1], b.sup[2]);
    EXPECT_LE(b.sup[2], b.sup_all);
    EXPECT_TRUE(std::isfinite(b.sup_all));
    EXPECT_GT(b.sup_all, 0.0);
    EXPECT_LE(b.worst_ratio_to_envelope, 1.0);
}

TEST(RoofTail, NuOfRoofClosedForm)
{
    const RoofFunction rf;
    GridDensity phi{{-0.1, 0.1}, std::vector<double>(4096, 5.0)};
    // mean of 1 - log|x| over (-a, a) is 1 + 1 - log a
    EXPECT_NEAR(nu_of_roof(rf, phi), 2.0 - std::log(0.1), 1e-12);
    EXPECT_NEAR(nu_of_roof(RoofFunction::constant_roof(3.0), phi), 3.0, 1e-12);
}

TEST(RoofTail, DoublingWithUnitRoofIsReturnTimeTail)
{
    DoublingMap d;
    PartitionConfig cfg;
    cfg.delta = {-0.5, 0.0};
    cfg.depth_cap = 20;
    const auto p = build_partition(d, cfg);
    const auto tR = tail_histogram_R(p);
    std::vector<double> L;
    for (int n = 0; n <= 12; ++n)
        L.push_back(n);
    const auto t = roof_tail(RoofFunction::constant_roof(1.0), d, p, 1.0, L);
    for (std::size_t g = 0; g < L.size(); ++g) {
        EXPECT_NEAR(t.cells_mass[g], tR.cells_mass[g], 1e-15) << g;
        EXPECT_NEAR(t.total_mass[g], tR.total_mass[g], 1e-15) << g;
    }
}

TEST(RoofTail, LorenzDecompositionAndFit)
{
    const auto& p = lorenz_partition();
    const RoofFunction rf;
    GridDensity phi{p.delta, std::vector<double>(1024, 1.0 / p.delta.length())};
    std::vector<double> L;
    for (int k = 0; k <= 60; ++k)
        L.push_back(k);
    const auto t = roof_tail(rf, LorenzMap1D{}, p, nu_of_roof(rf, phi), L);
    EXPECT_NEAR(t.cells_mass[0], p.coverage(), 1e-12);  // r > 0 everywhere
    for (std::size_t g = 0; g < L.size(); ++g) {
        EXPECT_NEAR(t.big_R[g] + t.mid_R[g] + t.small_R[g], t.cells_mass[g], 1e-9);
        if (g > 0)
            EXPECT_LE(t.cells_mass[g], t.cells_mass[g - 1]);
    }
    EXPECT_GT(t.sigma0, 0.0);
    EXPECT_GE(t.fit.r2, 0.85);
    std::ostringstream os;
    write_roof_tail_csv(os, t);
    EXPECT_EQ(os.str().substr(0, 2), "L,");
}

TEST(RoofTail, TooFewPoints)
{
    const auto& p = lorenz_partition();
    EXPECT_THROW(roof_tail(RoofFunction{}, LorenzMap1D{}, p, 4.0, {10.0, 11.0, 12.0}), FitUnreliable);
}

TEST(Uni, ConstantRoofIsNegativeControl)
{
    DoublingMap d;
    const auto part = doubling_full();
    const auto u = uni_divergence_probe(RoofFunction::constant_roof(1.0), d, part, 100.0, 12, 0);
    ASSERT_FALSE(u.points.empty());
    for (const auto& q : u.points) {
        EXPECT_EQ(q.dr, 0.0);
        EXPECT_EQ(q.Q, 0.0);
    }
    EXPECT_FALSE(u.diverges);
}

TEST(Uni, ProbeQuantitiesOnLorenz)
{
    const auto& p = lorenz_partition();
    const LorenzMap1D m;
    const RoofFunction rf;
    const auto u = uni_divergence_probe(rf, m, p, 100.0, 9, 0);
    ASSERT_EQ(u.points.size(), 7u);  // n = 3..9; y = 0.1 is the edge of Delta
    for (const auto& q : u.points) {
        EXPECT_LE(q.residual, 1e-9);
        EXPECT_NEAR(q.y, std::pow(10.0, -0.5 * q.n), 1e-18);
        EXPECT_NEAR(q.Q, std::max(0.0, std::abs(q.dr) - 100.0 * q.dF), 1e-9 * std::abs(q.dr));
        // the singular term -1/(lambda1 y) sits inside Dr
        EXPECT_GT(q.dF, 0.0);
    }
}

TEST(Uni, ZeroWindowSeesTheSingularTerm)
{
    // with C0 = 0 the probe measures |Dr|; deep in Delta the i = 0 term
    // -1/(lambda1 y) takes over once the cell around y stops changing
    const auto& p = lorenz_partition();
    const auto u = uni_divergence_probe(RoofFunction{}, LorenzMap1D{}, p, 0.0, 14, 0, 6);
    ASSERT_EQ(u.points.size(), 12u);
    for (std::size_t i = 9; i < u.points.size(); ++i)
        EXPECT_NEAR(u.points[i].dr * u.points[i].y, -1.0, 0.05) << u.points[i].n;
    EXPECT_TRUE(u.strictly_increasing);
    EXPECT_GE(u.growth, 10.0);
    EXPECT_GE(u.rank_corr, 0.99);
    EXPECT_TRUE(u.diverges);
}

TEST(Uni, VerdictRules)
{
    std::vector<UniPoint> pts;
    for (int n = 2; n <= 12; ++n) {
        UniPoint q;
        q.n = n;
        q.y = std::pow(10.0, -0.5 * n);
        q.dr = 1.0 / q.y;
        q.dF = 1.0;
        q.Q = q.dr;
        pts.push_back(q);
    }
    auto v = uni_verdict(pts, 0);
    EXPECT_TRUE(v.diverges);
    EXPECT_NEAR(v.growth, 1000.0, 1e-6);
    EXPECT_NEAR(v.ratio_slope, -1.0, 1e-12);
    pts[6].Q = pts[5].Q;  // a flat step breaks strict growth
    EXPECT_FALSE(uni_verdict(pts, 0).diverges);
    EXPECT_TRUE(uni_verdict(pts, 6).diverges);
}

TEST(Uni, UnresolvedSequenceThrows)
{
    PartitionConfig cfg;
    cfg.depth_cap = 6;
    cfg.allow_shortfall = true;
    const auto p = build_partition(LorenzMap1D{}, cfg);
    EXPECT_THROW(uni_divergence_probe(RoofFunction{}, LorenzMap1D{}, p, 100.0, 16, 0), SequenceDegenerate);
}
