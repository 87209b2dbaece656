#ifndef GLORENZ_CORE_HPP
#define GLORENZ_CORE_HPP

#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <string>

namespace glorenz {

// Failure kinds. Everything derives from Error so callers can catch broadly.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

#define GLORENZ_ERROR(Name)                                   \
    struct Name : Error {                                     \
        explicit Name(const std::string& w) : Error(w) {}     \
    }

GLORENZ_ERROR(SingularLeaf);
GLORENZ_ERROR(SingularPoint);
GLORENZ_ERROR(SingularOrbit);
GLORENZ_ERROR(DomainEscape);
GLORENZ_ERROR(IterationBudgetExceeded);
GLORENZ_ERROR(FitUnreliable);
GLORENZ_ERROR(UnresolvedMassTooLarge);
GLORENZ_ERROR(NoConvergence);
GLORENZ_ERROR(UnresolvedPoint);
GLORENZ_ERROR(SequenceDegenerate);
GLORENZ_ERROR(TruncationTooLarge);
GLORENZ_ERROR(ParseError);
GLORENZ_ERROR(ValidationError);
GLORENZ_ERROR(PreconditionError);

#undef GLORENZ_ERROR

struct CoverageShortfall : Error {
    double achieved;  // fraction of |Delta|
    CoverageShortfall(const std::string& w, double got) : Error(w), achieved(got) {}
};

inline constexpr double kSqrt2 = 1.41421356237309504880;
inline constexpr double kLn2 = 0.69314718055994530942;

struct Interval {
    double lo = 0.0;
    double hi = 0.0;

    double length() const { return hi - lo; }
    double mid() const { return 0.5 * (lo + hi); }
    bool contains(double x) const { return lo < x && x < hi; }
    bool contains_closed(double x) const { return lo <= x && x <= hi; }
};

inline double sgn(double x) { return (x > 0) - (x < 0); }

// Round-trippable decimal, used for every artifact.
inline std::string fmt17(double v)
{
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline void require(bool ok, const std::string& what)
{
    if (!ok)
        throw PreconditionError(what);
}

}  // namespace glorenz

#endif
