#ifndef GLORENZ_FLOW_HPP
#define GLORENZ_FLOW_HPP

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "core.hpp"
#include "lorenz_map.hpp"

namespace glorenz {

using Vec3 = std::array<double, 3>;

struct SectionPoint {
    double x = 0.0;
    double y = 0.0;
};

struct FlowParams {
    double lambda1 = 1.0;
    double lambda2 = -3.2;
    double lambda3 = -0.8;
    double a = 1.64;
    double b_left = 0.5;
    double b_right = -0.5;
    double s0 = 1.0;
    int rotation_left = 1;   // sign of the fiber term of g on x < 0
    int rotation_right = 1;  // and on x > 0
    int n_res = 5;

    static constexpr double fiber_slope = 0.25;

    double alpha() const { return -lambda3 / lambda1; }
    double beta() const { return -lambda2 / lambda1; }
    LorenzMap1D lorenz_map() const { return {alpha(), a, b_left, b_right}; }

    std::vector<std::string> violations() const
    {
        std::vector<std::string> v;
        if (!(lambda2 < lambda3 && lambda3 < 0.0 && 0.0 < -lambda3 && -lambda3 < lambda1))
            v.push_back("eigenvalue ordering lambda2 < lambda3 < 0 < -lambda3 < lambda1 violated");
        if (lambda1 > 0.0) {
            if (!(beta() > 1.0))
                v.push_back("beta = -lambda2/lambda1 must exceed 1");
            if (!(beta() > alpha() + 2.0))
                v.push_back("strong dissipativity beta > alpha + 2 violated (beta = " + fmt17(beta()) +
                            ", alpha = " + fmt17(alpha()) + ")");
            for (auto& s : lorenz_map().violations())
                v.push_back(s);
        }
        if (!(s0 > 0.0))
            v.push_back("lateral transit time s0 must be positive");
        if (std::abs(rotation_left) != 1 || std::abs(rotation_right) != 1)
            v.push_back("rotation signs must be +1 or -1");
        if (n_res < 2)
            v.push_back("non-resonance depth must be >= 2");
        return v;
    }

    void validate() const
    {
        auto v = violations();
        if (!v.empty()) {
            std::string msg = "invalid flow parameters:";
            for (auto& s : v)
                msg += "\n  - " + s;
            throw ValidationError(msg);
        }
    }

    // Resonances sum m_i lambda_i = lambda_k with 2 <= sum m_i <= n_res.
    std::vector<std::string> resonance_warnings() const
    {
        const double lam[3] = {lambda1, lambda2, lambda3};
        const double scale = std::abs(lambda1) + std::abs(lambda2) + std::abs(lambda3);
        std::vector<std::string> w;
        for (int m1 = 0; m1 <= n_res; ++m1)
            for (int m2 = 0; m1 + m2 <= n_res; ++m2)
                for (int m3 = 0; m1 + m2 + m3 <= n_res; ++m3) {
                    if (m1 + m2 + m3 < 2)
                        continue;
                    const double s = m1 * lam[0] + m2 * lam[1] + m3 * lam[2];
                    for (int k = 0; k < 3; ++k)
                        if (std::abs(s - lam[k]) <= 1e-12 * scale)
                            w.push_back("resonance " + std::to_string(m1) + "*l1 + " + std::to_string(m2) + "*l2 + " +
                                        std::to_string(m3) + "*l3 = l" + std::to_string(k + 1));
                }
        return w;
    }
};

inline Vec3 local_flow(const FlowParams& p, const Vec3& q, double t)
{
    require(t >= 0.0, "local_flow needs t >= 0");
    return {std::exp(p.lambda1 * t) * q[0], std::exp(p.lambda2 * t) * q[1], std::exp(p.lambda3 * t) * q[2]};
}

inline double exit_time(const FlowParams& p, double x0)
{
    if (x0 == 0.0)
        throw SingularLeaf("x = 0 lies on the stable manifold and never exits");
    require(std::abs(x0) <= 0.5, "exit_time needs |x0| <= 1/2");
    return -std::log(std::abs(x0)) / p.lambda1;
}

inline Vec3 cross_map_L(const FlowParams& p, const SectionPoint& s)
{
    if (s.x == 0.0)
        throw SingularLeaf("cross map undefined on x = 0");
    const double ax = std::abs(s.x);
    return {sgn(s.x), s.y * std::pow(ax, p.beta()), std::pow(ax, p.alpha())};
}

// From the exit face back to the section: affine in (y, z), side chosen by e[0].
inline SectionPoint lateral_return(const FlowParams& p, const Vec3& e)
{
    const double c = FlowParams::fiber_slope;
    SectionPoint out;
    if (e[0] > 0) {
        out.x = p.a * e[2] + p.b_right;
        out.y = c * p.rotation_right * e[1] + c * e[2] - c;
    } else {
        out.x = p.b_left - p.a * e[2];
        out.y = c * p.rotation_left * e[1] - c * e[2] + c;
    }
    if (!(std::abs(out.x) < 0.5 && std::abs(out.y) < 0.5))
        throw DomainEscape("return lands outside the section: (" + fmt17(out.x) + ", " + fmt17(out.y) + ")");
    return out;
}

inline SectionPoint poincare_map(const FlowParams& p, const SectionPoint& s)
{
    return lateral_return(p, cross_map_L(p, s));
}

inline double return_time(const FlowParams& p, const SectionPoint& s)
{
    return exit_time(p, s.x) + p.s0;
}

// Fiber derivative of the second coordinate of the return map.
inline double fiber_contraction(const FlowParams& p, double x)
{
    return FlowParams::fiber_slope * std::pow(std::abs(x), p.beta());
}

struct TrajectorySample {
    double t, x, y, z;
};

struct Trajectory {
    std::vector<TrajectorySample> samples;
    std::vector<SectionPoint> hits;   // section points after each completed lap
    std::vector<double> hit_times;
};

// Linear flow from the section to the exit face, then a straight lateral
// transit of duration s0 to the landing point.
inline Trajectory flow_trajectory(const FlowParams& p, SectionPoint s, double T, double dt)
{
    require(T >= 0.0 && dt > 0.0, "flow_trajectory needs T >= 0 and dt > 0");
    Trajectory out;
    const long n_samples = static_cast<long>(std::floor(T / dt)) + 1;
    long k = 0;
    double t0 = 0.0;
    while (k < n_samples) {
        const double tau = exit_time(p, s.x);
        const Vec3 start{s.x, s.y, 1.0};
        const Vec3 exit{sgn(s.x), std::exp(p.lambda2 * tau) * s.y, std::exp(p.lambda3 * tau)};
        const SectionPoint land = lateral_return(p, exit);
        const double t_exit = t0 + tau, t_land = t_exit + p.s0;
        for (; k < n_samples; ++k) {
            const double t = static_cast<double>(k) * dt;
            if (t >= t_land)
                break;
            if (t < t_exit) {
                const Vec3 q = local_flow(p, start, t - t0);
                out.samples.push_back({t, q[0], q[1], q[2]});
            } else {
                const double u = (t - t_exit) / p.s0;
                out.samples.push_back({t, exit[0] + u * (land.x - exit[0]), exit[1] + u * (land.y - exit[1]),
                                       exit[2] + u * (1.0 - exit[2])});
            }
        }
        if (k >= n_samples && t_land > T)
            break;
        out.hits.push_back(land);
        out.hit_times.push_back(t_land);
        s = land;
        t0 = t_land;
    }
    return out;
}

}  // namespace glorenz

#endif
