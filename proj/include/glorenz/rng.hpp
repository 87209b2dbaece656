#ifndef GLORENZ_RNG_HPP
#define GLORENZ_RNG_HPP

#include <cstdint>
#include <random>

namespace glorenz {

inline std::uint64_t splitmix64(std::uint64_t z)
{
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Counter based: the finalizer is a bijection of 2^64 and, for a fixed master,
// index -> master + (index+1)*odd is injective, so distinct paths never share a seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index)
{
    return splitmix64(master + (index + 1) * 0xd1b54a32d192ed03ULL);
}

// mt19937_64 for the stream; uniform doubles are taken straight from the top
// 53 bits so results do not depend on the standard library's distributions.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    std::uint64_t bits() { return eng_(); }
    std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n; }

private:
    std::mt19937_64 eng_;
};

}  // namespace glorenz

#endif
