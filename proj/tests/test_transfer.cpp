#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "glorenz/oracle_maps.hpp"
#include "glorenz/transfer.hpp"

using namespace glorenz;

namespace {

MarkovPartition doubling_full()
{
    PartitionConfig cfg;
    cfg.delta = {-0.5, 0.5};
    cfg.depth_cap = 4;
    return build_partition(DoublingMap{}, cfg);
}

// Affine Markov map induced on all of I: the left branch is already onto,
// the right one needs a second (left) step.
MarkovPartition affine_partition(const AffineMarkovMap& f)
{
    MarkovPartition p;
    p.delta = f.domain();
    p.cells.push_back(Cell{-0.5L, static_cast<long double>(f.c), 0u, 1});
    p.cells.push_back(Cell{static_cast<long double>(f.c), 0.5L, 1u, 2});
    p.covered = 1.0;
    p.kappa = std::min(f.slope(0), f.slope(0) * f.slope(1));
    p.depth_reached = 2;
    return p;
}

struct LorenzSetup {
    MarkovPartition part;
    UlamOperator op;
    DensityResult dens;
};

const LorenzSetup& lorenz()
{
    static const LorenzSetup s = [] {
        LorenzSetup r;
        PartitionConfig cfg;
        cfg.depth_cap = 24;
        cfg.allow_shortfall = true;
        r.part = build_partition(LorenzMap1D{}, cfg);
        UlamConfig uc;
        uc.bins = 1024;
        r.op = build_ulam(LorenzMap1D{}, r.part, uc);
        r.dens = invariant_density(r.op, 2e-2, 2000, 0.98);
        return r;
    }();
    return s;
}

}  // namespace

TEST(Ulam, DoublingEntriesAreExactHalves)
{
    DoublingMap d;
    const auto part = doubling_full();
    ASSERT_EQ(part.cells.size(), 2u);
    UlamConfig uc;
    uc.bins = 64;
    const auto op = build_ulam(d, part, uc);
    const double w = op.width();
    for (std::size_t i = 0; i < op.m; ++i) {
        // bin i covers, under x -> 2x +- 1/2, exactly the bins 2i, 2i+1 modulo m
        const std::size_t k0 = (2 * i) % op.m;
        for (std::size_t k = 0; k < op.m; ++k) {
            const double want = (k == k0 || k == k0 + 1) ? w / 2 : 0.0;
            EXPECT_NEAR(op.mass[i * op.m + k], want, 1e-15) << i << ' ' << k;
        }
    }
}

TEST(Ulam, DoublingFixesConstants)
{
    DoublingMap d;
    const auto part = doubling_full();
    const auto op = build_ulam(d, part);
    GridDensity one{op.delta, std::vector<double>(op.m, 1.0)};
    auto img = op.apply(one);
    for (double v : img.values)
        EXPECT_NEAR(v, 1.0, 1e-12);
    const auto r = invariant_density(op, 1e-10);
    for (double v : r.phi.values)
        EXPECT_NEAR(v, 1.0, 1e-10);
    const auto probe = spectral_radius_probe(op, {1, 16, 64});
    for (double s : probe.sup)
        EXPECT_NEAR(s, 1.0, 1e-10);
    // R = 1 everywhere: nu0 is nu (64 bins on I line up with the 4096-bin grid)
    const auto nu0 = pullback_nu0(d, part, r.phi, 64, 4);
    EXPECT_NEAR(nu0.mean_R, 1.0, 1e-12);
    for (double v : nu0.density.values)
        EXPECT_NEAR(v, 1.0, 1e-9);
}

TEST(Ulam, AffineOracleMatchesStochasticMatrix)
{
    const AffineMarkovMap f{0.2};
    const auto part = affine_partition(f);
    for (std::size_t m : {256u, 1024u}) {
        UlamConfig uc;
        uc.bins = m;
        const auto op = build_ulam(f, part, uc);
        // aggregate onto the two cells; F is affine and onto, so the exact
        // transition A|B -> A|B is proportional to target length
        const double len[2] = {f.c + 0.5, 0.5 - f.c};
        double agg[2][2] = {{0, 0}, {0, 0}}, row[2] = {0, 0};
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t k = 0; k < m; ++k) {
                const int a = op.delta.lo + (static_cast<double>(i) + 0.5) * op.width() < f.c ? 0 : 1;
                const int b = op.delta.lo + (static_cast<double>(k) + 0.5) * op.width() < f.c ? 0 : 1;
                agg[a][b] += op.mass[i * m + k];
                row[a] += op.mass[i * m + k];
            }
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
                EXPECT_NEAR(agg[a][b] / row[a], len[b], 2.0 / static_cast<double>(m));
    }
}

TEST(InvariantDensity, AffineOracleAgainstHandSolvedSystem)
{
    const AffineMarkovMap f{0.2};
    const auto part = affine_partition(f);
    const auto op = build_ulam(f, part);
    const auto r = invariant_density(op, 1e-10);
    for (double v : r.phi.values)
        EXPECT_NEAR(v, 1.0, 1e-10);  // F is full-branch affine

    // f's own density on {L = (-1/2, c), R = (c, 1/2)}: L covers I with slope s0,
    // R covers L with slope s1. Fixed point of the 2x2 transfer system:
    //   rhoL = rhoL/s0 + rhoR/s1,  rhoR = rhoL/s0,  rhoL |L| + rhoR |R| = 1.
    const double s0 = 1.0 / (f.c + 0.5), L = f.c + 0.5, Rl = 0.5 - f.c;
    const double rhoL = 1.0 / (L + Rl / s0), rhoR = rhoL / s0;
    EXPECT_NEAR(rhoL, rhoL / s0 + rhoR / f.slope(1), 1e-12);

    const auto nu0 = pullback_nu0(f, part, r.phi, 64, 64);
    EXPECT_NEAR(nu0.mean_R, 1.0 * L + 2.0 * Rl, 1e-12);
    for (std::size_t k = 0; k < nu0.density.bins(); ++k) {
        const double lo = nu0.density.edge(k), hi = lo + nu0.density.width();
        if (lo < f.c && f.c < hi)
            continue;
        // the second step moves quadrature points off the bin grid: at most
        // one point per bin edge out of ~5800 per bin
        const double want = hi <= f.c ? rhoL : rhoR;
        EXPECT_NEAR(nu0.density.values[k], want, 1e-3 * want) << k;
    }
}

TEST(Transfer, PositiveAndPreservesIntegralUpToUnresolved)
{
    const auto& s = lorenz();
    Rng rng(5);
    const double missing = s.part.delta.length() - s.part.covered;
    for (int t = 0; t < 10; ++t) {
        auto psi = random_step_function(s.op.delta, s.op.m, 12, 0.05, 3.0, rng);
        const double sup = *std::max_element(psi.values.begin(), psi.values.end());
        const auto img = s.op.apply(psi);
        EXPECT_LE(img.integral(), psi.integral() + 1e-12);
        EXPECT_LE(psi.integral() - img.integral(), sup * missing + 1e-9);
        for (double v : img.values)
            EXPECT_GT(v, 0.0);
    }
}

TEST(Transfer, DualityWithIndependentPullbacks)
{
    const auto& s = lorenz();
    Rng rng(8);
    const auto g = random_step_function(s.op.delta, s.op.m, 10, -1.0, 1.0, rng);
    std::vector<GridDensity> psis;
    for (int t = 0; t < 10; ++t) {
        auto p = random_step_function(s.op.delta, s.op.m, 10, 0.1, 1.0, rng);
        p.normalize();
        psis.push_back(p);
    }
    const auto d = duality_check(LorenzMap1D{}, s.part, s.op, g, psis);
    ASSERT_EQ(d.lhs.size(), 10u);
    EXPECT_LE(d.max_error, 1e-4);
}

TEST(Transfer, ThreadCountDoesNotChangeMatrix)
{
    PartitionConfig cfg;
    cfg.depth_cap = 16;
    cfg.allow_shortfall = true;
    const auto part = build_partition(LorenzMap1D{}, cfg);
    UlamConfig uc;
    uc.bins = 256;
    uc.max_unresolved = 0.1;
    const auto a = build_ulam(LorenzMap1D{}, part, uc, Parallel{1});
    const auto b = build_ulam(LorenzMap1D{}, part, uc, Parallel{4});
    EXPECT_EQ(a.mass, b.mass);
    GridDensity psi{a.delta, std::vector<double>(a.m, 1.0)};
    EXPECT_EQ(a.apply(psi, Parallel{1}).values, a.apply(psi, Parallel{3}).values);
}

TEST(Transfer, Errors)
{
    const auto& s = lorenz();
    UlamConfig uc;
    uc.bins = 64;
    uc.max_unresolved = 1e-4;
    EXPECT_THROW(build_ulam(LorenzMap1D{}, s.part, uc), UnresolvedMassTooLarge);
    EXPECT_THROW(invariant_density(s.op, 1e-30, 2, 0.98), NoConvergence);
    EXPECT_THROW(invariant_density(s.op), PreconditionError);  // coverage below 0.999
}

TEST(InvariantDensity, LorenzFixedPointProperties)
{
    const auto& s = lorenz();
    const auto& r = s.dens;
    EXPECT_GT(r.min_value, 0.0);
    EXPECT_NEAR(r.phi.integral(), 1.0, 1e-12);
    EXPECT_LE(r.eigen_residual, 1e-10);
    // the literal residual cannot beat the mass that falls outside the cells
    EXPECT_NEAR(r.residual, r.leak, 1e-8);
    EXPECT_TRUE(std::isfinite(r.max_gradient));
    // normalized iterates contract monotonically until roundoff
    ASSERT_GE(r.step_log.size(), 3u);
    for (std::size_t i = 2; i < r.step_log.size(); ++i)
        if (r.step_log[i - 1] > 1e-12)
            EXPECT_LT(r.step_log[i], r.step_log[i - 1]) << i;
    EXPECT_LE(r.step_log.back(), 1e-13);
}

TEST(InvariantDensity, SpectralProbeStaysNearOne)
{
    const auto& s = lorenz();
    const auto p = spectral_radius_probe(s.op, {1, 8, 32, 64});
    ASSERT_EQ(p.n.back(), 64);
    for (double sup : p.sup)
        EXPECT_LT(sup, 10.0);
    EXPECT_GE(p.root.back(), 0.97);
    EXPECT_LE(p.root.back(), 1.03);
}

TEST(Pullback, LayerCakeAndMass)
{
    const auto& s = lorenz();
    const auto nu0 = pullback_nu0(LorenzMap1D{}, s.part, s.dens.phi, 1000, 64);
    EXPECT_NEAR(nu0.mean_R, nu0.layer_cake, 1e-10);
    EXPECT_GT(nu0.mean_R, 1.0);
    EXPECT_NEAR(nu0.density.integral(), 1.0, nu0.truncated + 1e-3);
    for (double v : nu0.density.values)
        EXPECT_GE(v, 0.0);
}

TEST(Pullback, IsInvariantUnderF)
{
    const auto& s = lorenz();
    const LorenzMap1D m;
    const auto nu0 = pullback_nu0(m, s.part, s.dens.phi, 1000, 64);
    Rng rng(21);
    std::vector<GridDensity> tests;
    for (int t = 0; t < 10; ++t)
        tests.push_back(random_step_function(m.domain(), 1000, 10, -1.0, 1.0, rng));
    for (double d : nu0_invariance_defect(m, s.part, s.dens.phi, tests, nu0.mean_R, 64))
        EXPECT_LE(d, 5e-3);
}

TEST(Pullback, MatchesBirkhoffHistogram)
{
    const auto& s = lorenz();
    const LorenzMap1D m;
    const auto nu0 = pullback_nu0(m, s.part, s.dens.phi, 1000, 64);
    const auto orbit = birkhoff_histogram(m, 1000, 10'000'000, 3);
    EXPECT_NEAR(orbit.integral(), 1.0, 1e-12);
    EXPECT_LE(l1_distance(nu0.density, orbit), 0.05);
}

TEST(Pullback, BirkhoffThreadIndependent)
{
    const LorenzMap1D m;
    const auto a = birkhoff_histogram(m, 100, 200'000, 4, 20, 100, Parallel{1});
    const auto b = birkhoff_histogram(m, 100, 200'000, 4, 20, 100, Parallel{3});
    EXPECT_EQ(a.values, b.values);
}

TEST(GridDensity, CsvExport)
{
    GridDensity d{{0.0, 1.0}, {0.5, 1.5}};
    std::ostringstream os;
    write_density_csv(os, d);
    EXPECT_EQ(os.str(), "bin_center,value\n0.25,0.5\n0.75,1.5\n");
    EXPECT_NEAR(d.integral(), 1.0, 1e-15);
    EXPECT_EQ(d.bin_of(1.0), 1);
    EXPECT_EQ(d.bin_of(-0.1), -1);
}
