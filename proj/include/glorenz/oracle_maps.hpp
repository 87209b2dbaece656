#ifndef GLORENZ_ORACLE_MAPS_HPP
#define GLORENZ_ORACLE_MAPS_HPP

#include "lorenz_map.hpp"

namespace glorenz {

// x -> 2x + 1/2 on (-1/2, 0), 2x - 1/2 on (0, 1/2): both branches full.
struct DoublingMap {
    Interval domain() const { return {-0.5, 0.5}; }
    double split_point() const { return 0.0; }
    long double branch_eval(int b, long double x) const { return 2.0L * x + (b == 0 ? 0.5L : -0.5L); }
    double branch_eval_d(int b, double x) const { return 2.0 * x + (b == 0 ? 0.5 : -0.5); }
    long double branch_inverse(int b, long double y) const { return 0.5L * (y - (b == 0 ? 0.5L : -0.5L)); }
    double branch_inverse_step(int, double, double, double dz) const { return 0.5 * dz; }
    double branch_deriv(int, double) const { return 2.0; }
    double branch_deriv2(int, double) const { return 0.0; }
};

// Two affine branches split at c in (0, 1/2): (-1/2, c) onto I and (c, 1/2)
// onto (-1/2, c). Lebesgue-a.c. invariant density is constant on each branch
// with ratio rho_left / rho_right = 1 / (c + 1/2).
struct AffineMarkovMap {
    double c = 0.2;

    Interval domain() const { return {-0.5, 0.5}; }
    double split_point() const { return c; }
    double slope(int b) const { return b == 0 ? 1.0 / (c + 0.5) : (c + 0.5) / (0.5 - c); }
    long double branch_eval(int b, long double x) const
    {
        return b == 0 ? -0.5L + (x + 0.5L) * slope(0) : -0.5L + (x - c) * slope(1);
    }
    double branch_eval_d(int b, double x) const { return static_cast<double>(branch_eval(b, x)); }
    long double branch_inverse(int b, long double y) const
    {
        return b == 0 ? -0.5L + (y + 0.5L) / slope(0) : c + (y + 0.5L) / slope(1);
    }
    double branch_inverse_step(int b, double, double, double dz) const { return dz / slope(b); }
    double branch_deriv(int b, double) const { return slope(b); }
    double branch_deriv2(int, double) const { return 0.0; }

    // Exact invariant density on I, normalized to integral 1.
    double density(double x) const
    {
        const double rl = 1.0, rr = c + 0.5;
        const double z = rl * (c + 0.5) + rr * (0.5 - c);
        return (x < c ? rl : rr) / z;
    }
};

}  // namespace glorenz

#endif
