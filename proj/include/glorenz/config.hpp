#ifndef GLORENZ_CONFIG_HPP
#define GLORENZ_CONFIG_HPP

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "core.hpp"
#include "flow.hpp"
#include "hyperbolic.hpp"
#include "partition.hpp"
#include "roof.hpp"
#include "suspension.hpp"
#include "transfer.hpp"

namespace glorenz {

struct ExperimentConfig {
    FlowParams flow;

    // roof: "lorenz" (-log|x|/lambda1 + s) or "constant"
    std::string roof = "lorenz";
    double roof_constant = 1.0;
    double roof_bump_eps = 0.0;
    double roof_bump_center = 0.25;
    double roof_bump_width = 0.1;

    // inducing
    double a_delta = 0.1;
    double sigma = 1.0 / kSqrt2;
    double hyp_delta = 1e-9;
    double hyp_b = 0.45;
    int depth_cap = 40;
    double mass_target = 0.999;
    int finish_depth = 8;
    int monotone_samples = 100;
    bool allow_shortfall = false;
    std::string partition_file;  // reuse a saved partition instead of building one

    // operator
    int m_bins = 4096;
    double density_tol = 1e-3;
    int density_iter_cap = 2000;
    int duality_pairs = 10;
    double duality_tol = 1e-4;
    int nu0_bins = 1000;
    int nu0_per_bin = 1024;
    double birkhoff_iterates = 1e7;
    double nu0_tol = 0.05;

    // trajectory
    double traj_x = 0.05;
    double traj_y = 0.0;
    double traj_T = 50.0;
    double traj_dt = 0.01;

    // roof checks
    int ladder_small = 100;
    int ladder_large = 1000;
    double ladder_tol = 0.1;
    double tail_L_max = 80.0;
    double tail_L_step = 1.0;
    int tail_R0 = 4;
    double tail_r2 = 0.85;
    double uni_C0 = 100.0;
    int uni_seq_len = 14;
    int uni_cell = 0;
    int uni_burn_in = 0;

    // correlation
    double n_samples = 1e6;
    int burn_in = 4;
    double t_max = 30.0;
    double t_step = 1.0;
    std::string pairs = "xs_bump:xs_bump,xys_bump:xys_bump,xs_bump:xys_bump";
    int groups = 64;
    int min_fit_points = 4;
    double corr_r2 = 0.8;

    std::uint64_t seed = 20240601;
    int threads = 1;
    std::string output_dir = "out";

    HyperbolicTimeConfig hyp() const { return {sigma, hyp_delta, hyp_b}; }

    PartitionConfig partition() const
    {
        PartitionConfig c;
        c.hyp = hyp();
        c.delta = {-a_delta, a_delta};
        c.depth_cap = depth_cap;
        c.mass_target = mass_target;
        c.finish_depth = finish_depth;
        c.monotone_samples = monotone_samples;
        c.allow_shortfall = allow_shortfall;
        return c;
    }

    RoofFunction roof_function() const
    {
        if (roof == "constant")
            return RoofFunction::constant_roof(roof_constant);
        RoofFunction r;
        r.lambda1 = flow.lambda1;
        r.s0 = flow.s0;
        r.bump_eps = roof_bump_eps;
        r.bump_center = roof_bump_center;
        r.bump_width = roof_bump_width;
        return r;
    }

    std::vector<double> t_grid() const
    {
        std::vector<double> t;
        const auto n = static_cast<long>(std::floor(t_max / t_step + 1e-9));
        for (long k = 0; k <= n; ++k)
            t.push_back(static_cast<double>(k) * t_step);
        return t;
    }

    std::vector<double> tail_L_grid() const
    {
        std::vector<double> L;
        const auto n = static_cast<long>(std::floor(tail_L_max / tail_L_step + 1e-9));
        for (long k = 0; k <= n; ++k)
            L.push_back(static_cast<double>(k) * tail_L_step);
        return L;
    }

    // "a:b,c:d" -> observable pairs; unknown names throw PreconditionError
    std::vector<ObservablePair> observable_pairs() const
    {
        std::vector<ObservablePair> out;
        std::stringstream ss(pairs);
        std::string item;
        while (std::getline(ss, item, ',')) {
            const auto trim = [](std::string s) {
                const auto a = s.find_first_not_of(" \t"), b = s.find_last_not_of(" \t");
                return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
            };
            item = trim(item);
            const auto c = item.find(':');
            require(c != std::string::npos, "pair '" + item + "' is not of the form phi:psi");
            out.push_back({find_observable(trim(item.substr(0, c))), find_observable(trim(item.substr(c + 1)))});
        }
        return out;
    }

    std::vector<std::string> violations() const;
    void validate() const;
};

namespace detail {

using Field = std::variant<double*, int*, bool*, std::string*, std::uint64_t*>;

// Every key, in file order. `execution` keys do not enter the config hash.
struct KeySpec {
    std::string key;
    Field field;
    bool execution = false;
};

inline std::vector<KeySpec> key_table(ExperimentConfig& c)
{
    return {
        {"lambda1", &c.flow.lambda1},
        {"lambda2", &c.flow.lambda2},
        {"lambda3", &c.flow.lambda3},
        {"a", &c.flow.a},
        {"b_left", &c.flow.b_left},
        {"b_right", &c.flow.b_right},
        {"s0", &c.flow.s0},
        {"rotation_left", &c.flow.rotation_left},
        {"rotation_right", &c.flow.rotation_right},
        {"n_res", &c.flow.n_res},
        {"roof", &c.roof},
        {"roof_constant", &c.roof_constant},
        {"roof_bump_eps", &c.roof_bump_eps},
        {"roof_bump_center", &c.roof_bump_center},
        {"roof_bump_width", &c.roof_bump_width},
        {"a_delta", &c.a_delta},
        {"sigma", &c.sigma},
        {"hyp_delta", &c.hyp_delta},
        {"hyp_b", &c.hyp_b},
        {"depth_cap", &c.depth_cap},
        {"mass_target", &c.mass_target},
        {"finish_depth", &c.finish_depth},
        {"monotone_samples", &c.monotone_samples},
        {"allow_shortfall", &c.allow_shortfall},
        {"partition_file", &c.partition_file},
        {"m_bins", &c.m_bins},
        {"density_tol", &c.density_tol},
        {"density_iter_cap", &c.density_iter_cap},
        {"duality_pairs", &c.duality_pairs},
        {"duality_tol", &c.duality_tol},
        {"nu0_bins", &c.nu0_bins},
        {"nu0_per_bin", &c.nu0_per_bin},
        {"birkhoff_iterates", &c.birkhoff_iterates},
        {"nu0_tol", &c.nu0_tol},
        {"traj_x", &c.traj_x},
        {"traj_y", &c.traj_y},
        {"traj_T", &c.traj_T},
        {"traj_dt", &c.traj_dt},
        {"ladder_small", &c.ladder_small},
        {"ladder_large", &c.ladder_large},
        {"ladder_tol", &c.ladder_tol},
        {"tail_L_max", &c.tail_L_max},
        {"tail_L_step", &c.tail_L_step},
        {"tail_R0", &c.tail_R0},
        {"tail_r2", &c.tail_r2},
        {"uni_C0", &c.uni_C0},
        {"uni_seq_len", &c.uni_seq_len},
        {"uni_cell", &c.uni_cell},
        {"uni_burn_in", &c.uni_burn_in},
        {"n_samples", &c.n_samples},
        {"burn_in", &c.burn_in},
        {"t_max", &c.t_max},
        {"t_step", &c.t_step},
        {"pairs", &c.pairs},
        {"groups", &c.groups},
        {"min_fit_points", &c.min_fit_points},
        {"corr_r2", &c.corr_r2},
        {"seed", &c.seed},
        {"threads", &c.threads, true},
        {"output_dir", &c.output_dir, true},
    };
}

inline bool parse_value(const std::string& s, Field f)
{
    const char* b = s.data();
    const char* e = s.data() + s.size();
    return std::visit(
        [&](auto* p) -> bool {
            using T = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<T, std::string>) {
                *p = s;
                return true;
            } else if constexpr (std::is_same_v<T, bool>) {
                if (s == "true" || s == "1")
                    *p = true;
                else if (s == "false" || s == "0")
                    *p = false;
                else
                    return false;
                return true;
            } else {
                T v{};
                auto [ptr, ec] = std::from_chars(b, e, v);
                if (ec != std::errc() || ptr != e)
                    return false;
                *p = v;
                return true;
            }
        },
        f);
}

inline std::string show_value(Field f)
{
    return std::visit(
        [](auto* p) -> std::string {
            using T = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<T, std::string>)
                return *p;
            else if constexpr (std::is_same_v<T, bool>)
                return *p ? "true" : "false";
            else if constexpr (std::is_same_v<T, double>)
                return fmt17(*p);
            else
                return std::to_string(*p);
        },
        f);
}

inline std::string trim(const std::string& s)
{
    const auto a = s.find_first_not_of(" \t\r"), b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

}  // namespace detail

// Sets one key; `where` prefixes error messages ("line 7", "--set").
inline void set_config_key(ExperimentConfig& cfg, const std::string& key, const std::string& value,
                           const std::string& where)
{
    for (auto& k : detail::key_table(cfg))
        if (k.key == key) {
            if (!detail::parse_value(value, k.field))
                throw ParseError(where + ": bad value '" + value + "' for key '" + key + "'");
            return;
        }
    throw ParseError(where + ": unknown key '" + key + "'");
}

inline ExperimentConfig parse_config(std::istream& is)
{
    ExperimentConfig cfg;
    std::map<std::string, long> seen;
    std::string line;
    long lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string where = "line " + std::to_string(lineno);
        if (const auto h = line.find('#'); h != std::string::npos)
            line.erase(h);
        line = detail::trim(line);
        if (line.empty())
            continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ParseError(where + ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
        if (key.empty())
            throw ParseError(where + ": missing key");
        if (auto it = seen.find(key); it != seen.end())
            throw ParseError(where + ": duplicate key '" + key + "' (first set on line " + std::to_string(it->second) + ")");
        seen[key] = lineno;
        set_config_key(cfg, key, value, where);
    }
    return cfg;
}

inline std::vector<std::string> ExperimentConfig::violations() const
{
    std::vector<std::string> v = flow.violations();
    auto add = [&](bool ok, const std::string& s) {
        if (!ok)
            v.push_back(s);
    };
    if (roof != "lorenz" && roof != "constant")
        v.push_back("roof must be 'lorenz' or 'constant'");
    else
        for (auto& s : roof_function().violations())
            v.push_back(s);
    add(a_delta > 0.0 && a_delta < 0.5, "a_delta must lie in (0, 1/2)");
    for (auto& s : partition().violations())
        v.push_back(s);
    add(sigma > 0.0 && sigma < 1.0, "sigma must lie in (0,1)");
    add(hyp_delta > 0.0, "hyp_delta must be positive");
    // the b window depends on alpha
    const double b_hi = std::min(0.5, 1.0 / (4.0 * std::abs(1.0 - flow.alpha())));
    add(hyp_b > 0.0 && hyp_b < b_hi, "hyp_b must lie in (0, min(1/2, 1/(4|1-alpha|))) = (0, " + fmt17(b_hi) + ")");
    add(m_bins >= 2, "m_bins must be >= 2");
    add(density_tol > 0.0 && density_iter_cap >= 1, "density_tol > 0 and density_iter_cap >= 1 required");
    add(duality_pairs >= 1 && duality_tol > 0.0, "duality_pairs >= 1 and duality_tol > 0 required");
    add(nu0_bins >= 1 && nu0_per_bin >= 1, "nu0_bins and nu0_per_bin must be >= 1");
    add(birkhoff_iterates >= 100.0, "birkhoff_iterates must be >= 100");
    add(std::abs(traj_x) <= 0.5 && traj_x != 0.0 && std::abs(traj_y) < 0.5, "trajectory start must be on the section off x = 0");
    add(traj_T >= 0.0 && traj_dt > 0.0, "traj_T >= 0 and traj_dt > 0 required");
    add(ladder_small >= 1 && ladder_large > ladder_small, "need 1 <= ladder_small < ladder_large");
    add(tail_L_step > 0.0 && tail_L_max > tail_L_step, "tail grid needs 0 < tail_L_step < tail_L_max");
    add(uni_C0 >= 0.0 && uni_seq_len >= 2 && uni_cell >= 0 && uni_burn_in >= 0, "UNI probe needs C0 >= 0, seq_len >= 2");
    add(n_samples >= 1.0 && burn_in >= 0, "n_samples >= 1 and burn_in >= 0 required");
    add(t_step > 0.0 && t_max >= 0.0, "t grid needs t_step > 0 and t_max >= 0");
    add(groups >= 2 && min_fit_points >= 2, "groups >= 2 and min_fit_points >= 2 required");
    try {
        add(!observable_pairs().empty(), "pairs must name at least one pair");
    } catch (const PreconditionError& e) {
        v.push_back(e.what());
    }
    add(threads >= 1, "threads must be >= 1");
    add(!output_dir.empty(), "output_dir must be set");
    return v;
}

inline void ExperimentConfig::validate() const
{
    const auto v = violations();
    if (!v.empty()) {
        std::string msg = "config violates " + std::to_string(v.size()) + " invariant(s):";
        for (const auto& s : v)
            msg += "\n  - " + s;
        throw ValidationError(msg);
    }
}

inline ExperimentConfig load_config(const std::string& path)
{
    std::ifstream f(path);
    if (!f)
        throw ParseError("cannot open config file '" + path + "'");
    auto cfg = parse_config(f);
    cfg.validate();
    return cfg;
}

// Canonical key = value listing, execution keys left out.
inline std::string canonical_config(const ExperimentConfig& c)
{
    ExperimentConfig copy = c;
    std::string out;
    for (auto& k : detail::key_table(copy))
        if (!k.execution)
            out += k.key + " = " + detail::show_value(k.field) + "\n";
    return out;
}

}  // namespace glorenz

#endif
