#include <cmath>

#include <gtest/gtest.h>

#include "glorenz/flow.hpp"
#include "glorenz/rng.hpp"

using namespace glorenz;

namespace {

// Classical RK4 on the linear field, small fixed step.
Vec3 rk4(const FlowParams& p, Vec3 q, double t, int steps)
{
    const double h = t / steps;
    auto f = [&](const Vec3& v) { return Vec3{p.lambda1 * v[0], p.lambda2 * v[1], p.lambda3 * v[2]}; };
    for (int i = 0; i < steps; ++i) {
        Vec3 k1 = f(q), k2, k3, k4, tmp;
        for (int j = 0; j < 3; ++j) tmp[j] = q[j] + 0.5 * h * k1[j];
        k2 = f(tmp);
        for (int j = 0; j < 3; ++j) tmp[j] = q[j] + 0.5 * h * k2[j];
        k3 = f(tmp);
        for (int j = 0; j < 3; ++j) tmp[j] = q[j] + h * k3[j];
        k4 = f(tmp);
        for (int j = 0; j < 3; ++j) q[j] += h / 6.0 * (k1[j] + 2 * k2[j] + 2 * k3[j] + k4[j]);
    }
    return q;
}

}  // namespace

TEST(FlowParams, DefaultsValidateAndWindowHolds)
{
    FlowParams p;
    EXPECT_NO_THROW(p.validate());
    EXPECT_DOUBLE_EQ(p.alpha(), 0.8);
    EXPECT_DOUBLE_EQ(p.beta(), 3.2);
    // window (1.5389, 1.7411) recomputed from its closed form
    EXPECT_NEAR(LorenzMap1D::slope_window_lo(0.8), std::pow(2.0, 0.3) / 0.8, 1e-15);
    EXPECT_NEAR(LorenzMap1D::slope_window_lo(0.8), 1.5389, 1e-4);
    EXPECT_NEAR(LorenzMap1D::slope_window_hi(0.8), 1.7411, 1e-4);
    // 4*lambda3 = lambda2 for the defaults: reported, not fatal
    auto w = p.resonance_warnings();
    ASSERT_EQ(w.size(), 1u);
    EXPECT_NE(w[0].find("4*l3 = l2"), std::string::npos);
}

TEST(FlowParams, RejectsBadParameters)
{
    FlowParams p;
    p.a = 2.0;
    EXPECT_THROW(p.validate(), ValidationError);
    p = FlowParams{};
    p.lambda2 = -2.5;  // beta 2.5 < alpha + 2
    EXPECT_THROW(p.validate(), ValidationError);
    p = FlowParams{};
    p.lambda3 = -0.6;  // alpha below 1/sqrt2
    EXPECT_THROW(p.validate(), ValidationError);
}

TEST(FlowParams, ResonanceIsWarningOnly)
{
    FlowParams p;
    p.lambda2 = -3.3;
    EXPECT_NO_THROW(p.validate());
    EXPECT_TRUE(p.resonance_warnings().empty());
    p.n_res = 8;
    p.lambda2 = -3.0;  // l1 + 5*l3 = l2 at total order 6
    EXPECT_NO_THROW(p.validate());
    EXPECT_FALSE(p.resonance_warnings().empty());
}

TEST(LocalFlow, Examples)
{
    FlowParams p;
    Vec3 q = local_flow(p, {0.3, -0.1, 1.0}, 0.0);
    EXPECT_EQ(q[0], 0.3);
    EXPECT_EQ(q[1], -0.1);
    EXPECT_EQ(q[2], 1.0);
    q = local_flow(p, {std::exp(-2.0), 0.0, 1.0}, 2.0);
    EXPECT_NEAR(q[0], 1.0, 1e-15);
    Vec3 ode = rk4(p, {std::exp(-2.0), 0.2, 1.0}, 2.0, 20000);
    Vec3 ex = local_flow(p, {std::exp(-2.0), 0.2, 1.0}, 2.0);
    for (int j = 0; j < 3; ++j)
        EXPECT_NEAR(ode[j], ex[j], 1e-12);
    q = local_flow(p, {0.0, 0.3, 0.7}, 5.0);
    EXPECT_EQ(q[0], 0.0);
}

TEST(ExitTime, Examples)
{
    FlowParams p;
    EXPECT_NEAR(exit_time(p, 0.5), std::log(2.0), 1e-15);
    // cross-check by bisecting the hitting time of x = 1
    double lo = 0, hi = 5;
    for (int i = 0; i < 200; ++i) {
        double mid = 0.5 * (lo + hi);
        (local_flow(p, {0.5, 0, 1}, mid)[0] < 1.0 ? lo : hi) = mid;
    }
    EXPECT_NEAR(exit_time(p, 0.5), lo, 1e-12);
    FlowParams q = p;
    q.lambda1 = 2.0;
    EXPECT_NEAR(exit_time(q, 0.5), std::log(2.0) / 2.0, 1e-15);
    EXPECT_THROW(exit_time(p, 0.0), SingularLeaf);
    Rng rng(3);
    for (int i = 0; i < 1000; ++i) {
        double x = rng.uniform(-0.5, 0.5);
        if (x != 0.0)
            EXPECT_GE(exit_time(p, x), std::log(2.0) / p.lambda1 - 1e-15);
    }
}

TEST(CrossMap, Examples)
{
    FlowParams p;
    EXPECT_EQ(cross_map_L(p, {0.3, 0.0})[1], 0.0);
    Vec3 e = cross_map_L(p, {0.5, 0.5});
    EXPECT_EQ(e[0], 1.0);
    // long double power as the high-precision oracle
    EXPECT_NEAR(e[1], static_cast<double>(0.5L * std::pow(2.0L, -3.2L)), 2e-16);
    EXPECT_NEAR(e[2], static_cast<double>(std::pow(2.0L, -0.8L)), 2e-16);
    EXPECT_EQ(cross_map_L(p, {-0.5, 0.5})[0], -1.0);
    EXPECT_EQ(cross_map_L(p, {0.2, 0.1})[2], cross_map_L(p, {0.2, -0.4})[2]);
    EXPECT_THROW(cross_map_L(p, {0.0, 0.1}), SingularLeaf);
}

TEST(PoincareMap, ExamplesAndProperties)
{
    FlowParams p;
    auto m = p.lorenz_map();
    // x -> 0+ limit
    SectionPoint q = poincare_map(p, {1e-14, 0.3});
    EXPECT_NEAR(q.x, -0.5, 1e-10);
    EXPECT_NEAR(q.y, -0.25, 1e-10);
    EXPECT_GT(q.x, -0.5);
    Rng rng(11);
    for (int i = 0; i < 10000; ++i) {
        double x = rng.uniform(-0.5, 0.5), y1 = rng.uniform(-0.5, 0.5), y2 = rng.uniform(-0.5, 0.5);
        if (x == 0.0)
            continue;
        SectionPoint a = poincare_map(p, {x, y1}), b = poincare_map(p, {x, y2});
        EXPECT_EQ(a.x, map_eval(m, x));
        EXPECT_NEAR(std::abs(a.y - b.y), std::pow(std::abs(x), 3.2) * 0.25 * std::abs(y1 - y2), 1e-15);
        SectionPoint c = poincare_map(p, {-x, -y1});
        EXPECT_NEAR(c.x, -a.x, 1e-15);
        EXPECT_NEAR(c.y, -a.y, 1e-15);
        EXPECT_LT(std::abs(a.x), 0.5);
        EXPECT_LT(std::abs(a.y), 0.5);
        // fiber contraction and domination
        double cg = fiber_contraction(p, x);
        EXPECT_LE(cg, 0.25 * std::pow(2.0, -3.2));
        EXPECT_LT(cg / map_deriv(m, x), 1.0);
    }
}

TEST(ReturnTime, Examples)
{
    FlowParams p;
    EXPECT_NEAR(return_time(p, {0.5, 0.1}), std::log(2.0) + 1.0, 1e-15);
    EXPECT_EQ(return_time(p, {0.123, 0.4}), return_time(p, {0.123, -0.3}));
    EXPECT_GT(return_time(p, {1e-100, 0}), 230.0);
    EXPECT_THROW(return_time(p, {0.0, 0}), SingularLeaf);
}

TEST(Trajectory, DegenerateAndSingleSegment)
{
    FlowParams p;
    auto tr = flow_trajectory(p, {0.1, 0.2}, 1.0, 5.0);
    ASSERT_EQ(tr.samples.size(), 1u);
    EXPECT_EQ(tr.samples[0].t, 0.0);
    tr = flow_trajectory(p, {0.1, 0.2}, 2.0, 0.01);  // exit time log 10 > 2
    EXPECT_TRUE(tr.hits.empty());
    for (auto& s : tr.samples) {
        Vec3 q = local_flow(p, {0.1, 0.2, 1.0}, s.t);
        EXPECT_NEAR(s.x, q[0], 1e-15);
        EXPECT_NEAR(s.z, q[2], 1e-15);
    }
}

TEST(Trajectory, SectionHitsMatchPoincareMap)
{
    FlowParams p;
    Rng rng(5);
    int checked = 0;
    for (int i = 0; i < 10000; ++i) {
        SectionPoint s{rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)};
        double T = 0;
        SectionPoint w = s;
        for (int k = 0; k < 3; ++k) {
            T += return_time(p, w);
            w = poincare_map(p, w);
        }
        auto tr = flow_trajectory(p, s, T + 1e-9, T);
        ASSERT_EQ(tr.hits.size(), 3u);
        w = s;
        for (int k = 0; k < 3; ++k) {
            w = poincare_map(p, w);
            EXPECT_NEAR(tr.hits[k].x, w.x, 1e-9);
            EXPECT_NEAR(tr.hits[k].y, w.y, 1e-9);
        }
        EXPECT_NEAR(tr.hit_times.back(), T, 1e-9);
        ++checked;
    }
    EXPECT_EQ(checked, 10000);
}
