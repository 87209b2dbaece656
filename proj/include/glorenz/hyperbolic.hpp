#ifndef GLORENZ_HYPERBOLIC_HPP
#define GLORENZ_HYPERBOLIC_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "core.hpp"
#include "lorenz_map.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace glorenz {

struct HyperbolicTimeConfig {
    double sigma = 1.0 / kSqrt2;
    double delta = 1e-9;
    double b = 0.45;

    static double b_limit(double alpha) { return std::min(0.5, 1.0 / (4.0 * std::abs(1.0 - alpha))); }

    std::vector<std::string> violations(double alpha) const
    {
        std::vector<std::string> v;
        if (!(sigma > 0.0 && sigma < 1.0))
            v.push_back("hyperbolic contraction sigma must lie in (0,1)");
        if (!(delta > 0.0 && delta < 1.0))
            v.push_back("recurrence cutoff delta must lie in (0,1)");
        if (!(b > 0.0 && b < b_limit(alpha)))
            v.push_back("recurrence exponent needs 0 < b < min(1/2, 1/(4|1-alpha|)) = " + fmt17(b_limit(alpha)));
        return v;
    }
};

// |z|_delta measured from the singular point.
inline double delta_norm(double dist, double delta) { return dist < delta ? dist : 1.0; }

// Steps needed after visiting distance `dist` before the recurrence clause can hold:
// sigma^{b k} <= |z|_delta  <=>  k >= log|z|_delta / (b log sigma).
inline double recurrence_wait(double dist, const HyperbolicTimeConfig& cfg)
{
    const double d = delta_norm(dist, cfg.delta);
    if (d <= 0.0)
        return std::numeric_limits<double>::infinity();
    return std::log(d) / (cfg.b * std::log(cfg.sigma));
}

// Streaming test of every n along one orbit. Feed the orbit point x_{n-1} and
// get back whether n is a hyperbolic time. Both clauses reduce to running maxima.
class HyperbolicScanner {
public:
    explicit HyperbolicScanner(const HyperbolicTimeConfig& cfg) : cfg_(cfg), c_(-std::log(cfg.sigma)) {}

    bool push(double log_deriv, double dist)
    {
        best_ = std::max(best_, sum_ - static_cast<double>(n_) * c_);
        wait_ = std::max(wait_, static_cast<double>(n_) + recurrence_wait(dist, cfg_));
        sum_ += log_deriv;
        ++n_;
        const double slack = 1e-12 * (1.0 + std::abs(sum_));
        return sum_ - static_cast<double>(n_) * c_ >= best_ - slack && static_cast<double>(n_) >= wait_;
    }

private:
    HyperbolicTimeConfig cfg_;
    double c_;
    double sum_ = 0.0;
    double best_ = -std::numeric_limits<double>::infinity();
    double wait_ = -std::numeric_limits<double>::infinity();
    long n_ = 0;
};

template <IntervalMap M>
bool is_hyperbolic_time(const M& m, const HyperbolicTimeConfig& cfg, double x, int n)
{
    require(n >= 1, "hyperbolic time needs n >= 1");
    const double c = m.split_point();
    HyperbolicScanner scan(cfg);
    bool last = false;
    for (int j = 0; j < n; ++j) {
        if (x == c)
            throw SingularOrbit("orbit hits the singular point at step " + std::to_string(j));
        const int b = x < c ? 0 : 1;
        last = scan.push(std::log(m.branch_deriv(b, x)), std::abs(x - c));
        x = m.branch_eval_d(b, x);
    }
    return last;
}

struct FrequencyEstimate {
    double mean = 0.0;
    double stderr_ = 0.0;
};

template <IntervalMap M>
FrequencyEstimate hyperbolic_time_frequency(const M& m, const HyperbolicTimeConfig& cfg, std::size_t samples,
                                            int horizon, std::uint64_t seed, const Parallel& par = {})
{
    require(samples >= 1 && horizon >= 1, "frequency estimate needs samples >= 1 and horizon >= 1");
    std::vector<double> frac(samples);
    const Interval d = m.domain();
    const double c = m.split_point();
    par.each(samples, [&](std::size_t i) {
        Rng rng(derive_seed(seed, i));
        double x = rng.uniform(d.lo, d.hi);
        HyperbolicScanner scan(cfg);
        int hits = 0;
        for (int j = 0; j < horizon; ++j) {
            if (x == c)
                throw SingularOrbit("orbit hits the singular point");
            const int b = x < c ? 0 : 1;
            hits += scan.push(std::log(m.branch_deriv(b, x)), std::abs(x - c));
            x = m.branch_eval_d(b, x);
        }
        frac[i] = static_cast<double>(hits) / horizon;
    });
    FrequencyEstimate e;
    for (double f : frac)
        e.mean += f;
    e.mean /= static_cast<double>(samples);
    double ss = 0.0;
    for (double f : frac)
        ss += (f - e.mean) * (f - e.mean);
    if (samples > 1)
        e.stderr_ = std::sqrt(ss / static_cast<double>(samples - 1) / static_cast<double>(samples));
    return e;
}

struct RecurrenceStat {
    double mean = 0.0;
    double stderr_ = 0.0;
    double exceed_fraction = 0.0;  // share of orbits whose average exceeds eps
};

// Birkhoff averages of -log|f^i x|_delta over i < n from Lebesgue-random starts.
template <IntervalMap M>
RecurrenceStat slow_recurrence_stat(const M& m, double delta, std::size_t samples, int n, double eps,
                                    std::uint64_t seed, const Parallel& par = {})
{
    require(n >= 1 && samples >= 1, "slow recurrence needs n >= 1 and samples >= 1");
    std::vector<double> avg(samples);
    const Interval d = m.domain();
    const double c = m.split_point();
    par.each(samples, [&](std::size_t i) {
        Rng rng(derive_seed(seed, i));
        double x = rng.uniform(d.lo, d.hi), s = 0.0;
        for (int j = 0; j < n; ++j) {
            if (x == c)
                throw SingularOrbit("orbit hits the singular point");
            s -= std::log(delta_norm(std::abs(x - c), delta));
            x = map_eval(m, x);
        }
        avg[i] = s / n;
    });
    RecurrenceStat r;
    for (double v : avg) {
        r.mean += v;
        r.exceed_fraction += v > eps;
    }
    r.mean /= static_cast<double>(samples);
    r.exceed_fraction /= static_cast<double>(samples);
    double ss = 0.0;
    for (double v : avg)
        ss += (v - r.mean) * (v - r.mean);
    if (samples > 1)
        r.stderr_ = std::sqrt(ss / static_cast<double>(samples - 1) / static_cast<double>(samples));
    return r;
}

}  // namespace glorenz

#endif
