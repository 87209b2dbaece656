#ifndef GLORENZ_PIPELINE_HPP
#define GLORENZ_PIPELINE_HPP

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <boost/version.hpp>
#include <openssl/evp.h>

#include "config.hpp"
#include "flow.hpp"
#include "partition.hpp"
#include "roof.hpp"
#include "suspension.hpp"
#include "transfer.hpp"

namespace glorenz {

inline constexpr const char* kVersion = "1.0.0";

inline std::string sha256_hex(const std::string& data)
{
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw Error("SHA-256 failed");
    std::ostringstream os;
    for (unsigned i = 0; i < len; ++i)
        os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    return os.str();
}

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

inline const std::vector<std::string>& known_commands()
{
    static const std::vector<std::string> c{"validate", "simulate", "induce", "density", "roof-check",
                                            "uni-check", "correlation", "all"};
    return c;
}

// Stages are computed on first use and shared by later ones.
class Pipeline {
public:
    Pipeline(ExperimentConfig cfg, std::ostream& log) : cfg_(std::move(cfg)), log_(log), par_{static_cast<unsigned>(cfg_.threads)} {}

    const ExperimentConfig& config() const { return cfg_; }
    const std::vector<CheckResult>& checks() const { return checks_; }
    const std::vector<std::string>& artifacts() const { return artifacts_; }
    const std::vector<std::string>& notes() const { return notes_; }

    const MarkovPartition& partition()
    {
        if (!part_) {
            const auto t0 = clock::now();
            if (!cfg_.partition_file.empty()) {
                std::ifstream f(cfg_.partition_file);
                if (!f)
                    throw Error("cannot open partition file '" + cfg_.partition_file + "'");
                part_ = read_partition(f);
            } else {
                part_ = build_partition(cfg_.flow.lorenz_map(), cfg_.partition(), par_);
            }
            log_ << "partition: " << part_->cells.size() << " cells, coverage " << fmt17(part_->coverage()) << ", depth "
                 << part_->depth_reached << " (" << seconds_since(t0) << " s)\n";
        }
        return *part_;
    }

    const UlamOperator& ulam()
    {
        if (!op_) {
            UlamConfig uc;
            uc.bins = static_cast<std::size_t>(cfg_.m_bins);
            uc.max_unresolved = std::max(uc.max_unresolved, 1.0 - cfg_.mass_target);
            op_ = build_ulam(cfg_.flow.lorenz_map(), partition(), uc, par_);
        }
        return *op_;
    }

    const DensityResult& density()
    {
        if (!dens_) {
            const auto& op = ulam();
            // the residual gate is a check, not an error, so no tolerance here
            dens_ = invariant_density(op, std::numeric_limits<double>::infinity(), cfg_.density_iter_cap,
                                      std::min(cfg_.mass_target, 1.0 - op.unresolved_fraction), 1e-13, par_);
        }
        return *dens_;
    }

    const PhysicalSamples& samples()
    {
        if (!samples_)
            samples_ = sample_physical_measure(partition(), cfg_.flow, cfg_.roof_function(), density().phi,
                                               static_cast<std::size_t>(cfg_.n_samples), cfg_.burn_in, cfg_.seed, par_);
        return *samples_;
    }

    void simulate()
    {
        const auto tr = flow_trajectory(cfg_.flow, {cfg_.traj_x, cfg_.traj_y}, cfg_.traj_T, cfg_.traj_dt);
        std::ostringstream os;
        os << "t,x,y,z\n";
        for (const auto& s : tr.samples)
            os << fmt17(s.t) << ',' << fmt17(s.x) << ',' << fmt17(s.y) << ',' << fmt17(s.z) << '\n';
        write("trajectory.csv", os.str());
    }

    void induce()
    {
        const auto& p = partition();
        {
            std::ostringstream os;
            write_partition(os, p);
            write("partition.txt", os.str());
        }
        check("coverage", p.coverage() >= cfg_.mass_target,
              fmt17(p.coverage()) + " of |Delta| (target " + fmt17(cfg_.mass_target) + ")");
        const auto t = tail_histogram_R(p);
        std::ostringstream os;
        os << "n,mass_cells,mass_total\n";
        for (std::size_t i = 0; i < t.n.size(); ++i)
            os << t.n[i] << ',' << fmt17(t.cells_mass[i]) << ',' << fmt17(t.total_mass[i]) << '\n';
        os << "# gamma=" << fmt17(t.gamma) << "\n# r2=" << fmt17(t.fit.r2) << "\n# fit_from=" << t.fit_from
           << "\n# fit_to=" << t.fit_to << '\n';
        write("r_tail.csv", os.str());
        check("R_tail", t.fit.slope < 0.0 && t.fit.r2 >= 0.9,
              "slope " + fmt17(t.fit.slope) + ", R2 " + fmt17(t.fit.r2));
    }

    void density_stage()
    {
        const auto map = cfg_.flow.lorenz_map();
        const auto& d = density();
        {
            std::ostringstream os;
            write_density_csv(os, d.phi);
            write("density.csv", os.str());
        }
        check("density_residual", d.residual <= cfg_.density_tol,
              "||P phi - phi||_1 = " + fmt17(d.residual) + " (leak " + fmt17(d.leak) + ")");
        check("density_positive", d.min_value > 0.0, "min " + fmt17(d.min_value));

        Rng rng(derive_seed(cfg_.seed, 0xD0A1));
        const auto& op = ulam();
        const auto g = random_step_function(op.delta, op.m, 10, -1.0, 1.0, rng);
        std::vector<GridDensity> psis;
        for (int k = 0; k < cfg_.duality_pairs; ++k) {
            auto p = random_step_function(op.delta, op.m, 10, 0.1, 1.0, rng);
            p.normalize();
            psis.push_back(std::move(p));
        }
        const auto du = duality_check(map, partition(), op, g, psis, par_);
        check("duality", du.max_error <= cfg_.duality_tol, "max error " + fmt17(du.max_error));

        const auto nu0 = pullback_nu0(map, partition(), d.phi, static_cast<std::size_t>(cfg_.nu0_bins),
                                      static_cast<std::size_t>(cfg_.nu0_per_bin), par_);
        {
            std::ostringstream os;
            write_density_csv(os, nu0.density);
            os << "# mean_R=" << fmt17(nu0.mean_R) << "\n# truncated=" << fmt17(nu0.truncated) << '\n';
            write("nu0.csv", os.str());
        }
        const auto orbit = birkhoff_histogram(map, static_cast<std::size_t>(cfg_.nu0_bins),
                                              static_cast<std::size_t>(cfg_.birkhoff_iterates),
                                              derive_seed(cfg_.seed, 0xB1F), 100, 1000, par_);
        const double l1 = l1_distance(nu0.density, orbit);
        check("nu0_vs_birkhoff", l1 <= cfg_.nu0_tol, "L1 " + fmt17(l1));
    }

    void roof_check()
    {
        const auto map = cfg_.flow.lorenz_map();
        const auto rf = cfg_.roof_function();
        const auto& p = partition();
        std::ostringstream os;
        std::vector<CheckResult> local;
        auto rec = [&](const std::string& n, bool ok, const std::string& d) {
            local.push_back({n, ok, d});
            check(n, ok, d);
        };

        // inf r over 1e5 points drawn from the certified cells
        const auto cum = p.cumulative_mass();
        Rng rng(derive_seed(cfg_.seed, 0x200F));
        double inf_r = std::numeric_limits<double>::infinity();
        for (int i = 0; i < 100000; ++i) {
            const double u = rng.uniform() * cum.back();
            const auto c = static_cast<std::size_t>(std::upper_bound(cum.begin(), cum.end(), u) - cum.begin() - 1);
            const Cell& cell = p.cells[std::min(c, p.cells.size() - 1)];
            const double x = static_cast<double>(cell.left) + rng.uniform() * cell.length();
            if (!(x > cell.left && x < cell.right))
                continue;
            inf_r = std::min(inf_r, eval_roof(rf, map, cell, x));
        }
        os << "inf_r=" << fmt17(inf_r) << "\nr0=" << fmt17(rf.r0()) << '\n';
        rec("roof_lower_bound", inf_r >= rf.r0() - 1e-12, "inf r " + fmt17(inf_r) + " vs log2/lambda1 " + fmt17(rf.r0()));

        const auto pin = measure_pinching(rf);
        os << "xi1=" << fmt17(pin.xi1) << "\nxi2=" << fmt17(pin.xi2) << '\n';

        const auto b = branch_derivative_bound(rf, map, p,
                                               {static_cast<std::size_t>(cfg_.ladder_small), static_cast<std::size_t>(cfg_.ladder_large)},
                                               cfg_.hyp(), rf.constant ? 1.0 : pin.xi2, par_);
        for (std::size_t i = 0; i < b.ladder.size(); ++i)
            os << "ladder_" << b.ladder[i] << '=' << fmt17(b.sup[i]) << '\n';
        os << "ladder_all=" << fmt17(b.sup_all) << "\nworst_ratio_to_envelope=" << fmt17(b.worst_ratio_to_envelope) << '\n';
        if (b.sup.size() == 2) {
            const double rel = std::abs(b.sup[1] - b.sup[0]) / std::max(b.sup[1], 1e-300);
            rec("branch_derivative_stable", b.sup[1] == b.sup[0] || rel <= cfg_.ladder_tol,
                fmt17(b.sup[0]) + " -> " + fmt17(b.sup[1]) + " (relative change " + fmt17(rel) + ")");
        } else {
            rec("branch_derivative_stable", false, "partition has fewer cells than the ladder");
        }

        const double nu_rho = nu_of_roof(rf, density().phi);
        const auto t = roof_tail(rf, map, p, nu_rho, cfg_.tail_L_grid(), cfg_.tail_R0, 4, par_);
        os << "nu_rho=" << fmt17(nu_rho) << "\nxi=" << fmt17(t.xi) << "\nsigma0=" << fmt17(t.sigma0)
           << "\ntail_r2=" << fmt17(t.fit.r2) << "\ntail_fit_from=" << fmt17(t.fit_from)
           << "\ntail_fit_to=" << fmt17(t.fit_to) << '\n';
        rec("roof_tail", t.sigma0 > 0.0 && t.fit.r2 >= cfg_.tail_r2,
            "sigma0 " + fmt17(t.sigma0) + ", R2 " + fmt17(t.fit.r2));
        os << "L,mass_cells,mass_total,big_R,mid_R,small_R\n";
        for (std::size_t i = 0; i < t.L.size(); ++i)
            os << fmt17(t.L[i]) << ',' << fmt17(t.cells_mass[i]) << ',' << fmt17(t.total_mass[i]) << ','
               << fmt17(t.big_R[i]) << ',' << fmt17(t.mid_R[i]) << ',' << fmt17(t.small_R[i]) << '\n';
        for (const auto& c : local)
            os << (c.pass ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
        write("roof_report.txt", os.str());
    }

    void uni_check()
    {
        const auto rf = cfg_.roof_function();
        const auto u = uni_divergence_probe(rf, cfg_.flow.lorenz_map(), partition(), cfg_.uni_C0, cfg_.uni_seq_len,
                                            static_cast<std::size_t>(cfg_.uni_cell),
                                            static_cast<std::size_t>(cfg_.uni_burn_in));
        std::ostringstream os;
        write_uni_csv(os, u);
        os << "# strictly_increasing=" << (u.strictly_increasing ? "true" : "false")
           << "\n# rank_corr=" << fmt17(u.rank_corr) << "\n# growth=" << fmt17(u.growth)
           << "\n# ratio_slope=" << fmt17(u.ratio_slope) << "\n# diverges=" << (u.diverges ? "true" : "false") << '\n';
        std::string detail = "increasing " + std::string(u.strictly_increasing ? "yes" : "no") + ", rank corr " +
                             fmt17(u.rank_corr) + ", growth " + fmt17(u.growth);
        if (rf.constant) {
            const std::string note = "NEGATIVE-CONTROL: constant roof, Q(n) does not diverge";
            os << "# note=" << note << '\n';
            notes_.push_back(note);
            detail += "; " + note;
        }
        write("uni_probe.csv", os.str());
        check("uni_divergence", u.diverges, detail);
    }

    void correlation()
    {
        auto pairs = cfg_.observable_pairs();
        pairs.push_back({pairs.front().phi, find_observable("one")});  // control
        const auto cs = correlation_series(samples(), partition(), cfg_.flow, cfg_.roof_function(), pairs, cfg_.t_grid(),
                                           static_cast<std::size_t>(cfg_.groups),
                                           static_cast<std::size_t>(cfg_.min_fit_points), par_);
        std::ostringstream os;
        write_correlation_csv(os, cs);
        write("correlation.csv", os.str());
        for (std::size_t i = 0; i + 1 < cs.size(); ++i) {
            const auto& s = cs[i];
            check("decay " + s.phi_name + ":" + s.psi_name, s.signal && s.delta_hat > 0.0 && s.fit.r2 >= cfg_.corr_r2,
                  s.signal ? "delta " + fmt17(s.delta_hat) + ", R2 " + fmt17(s.fit.r2) + " on [" + fmt17(s.window_lo) +
                                 ", " + fmt17(s.window_hi) + "]"
                           : s.note);
        }
        const auto& c = cs.back();
        bool quiet = true;
        for (std::size_t k = 0; k < c.t.size(); ++k)
            quiet = quiet && c.c_hat[k] <= 3.0 * c.std_err[k];
        check("control " + c.phi_name + ":one", quiet, "C_hat <= 3 stderr at every t: " + std::string(quiet ? "yes" : "no"));
    }

    // Exit code: 0 all checks pass, 2 some check failed, 1 on error.
    int run(const std::string& cmd)
    {
        const auto t0 = clock::now();
        try {
            if (std::find(known_commands().begin(), known_commands().end(), cmd) == known_commands().end())
                throw PreconditionError("unknown command '" + cmd + "'");
            if (cmd == "validate") {
                cfg_.validate();
                for (const auto& w : cfg_.flow.resonance_warnings())
                    log_ << "warning: " << w << '\n';
                log_ << "config valid\n";
                return 0;
            }
            std::filesystem::create_directories(cfg_.output_dir);
            const bool all = cmd == "all";
            if (all || cmd == "simulate")
                stage("lorenz_flow", [&] { simulate(); });
            if (all || cmd == "induce")
                stage("inducing_scheme", [&] { induce(); });
            if (all || cmd == "density")
                stage("transfer_operator", [&] { density_stage(); });
            if (all || cmd == "roof-check")
                stage("roof_and_uni", [&] { roof_check(); });
            if (all || cmd == "uni-check")
                stage("roof_and_uni", [&] { uni_check(); });
            if (all || cmd == "correlation")
                stage("suspension_correlation", [&] { correlation(); });
            write_manifest(seconds_since(t0));
        } catch (const std::exception& e) {
            log_ << "error: " << e.what() << '\n';
            return 1;
        }
        bool ok = true;
        for (const auto& c : checks_)
            ok = ok && c.pass;
        return ok ? 0 : 2;
    }

private:
    using clock = std::chrono::steady_clock;

    static double seconds_since(clock::time_point t0)
    {
        return std::chrono::duration<double>(clock::now() - t0).count();
    }

    template <class Fn>
    void stage(const std::string& module, Fn&& fn)
    {
        try {
            fn();
        } catch (const std::exception& e) {
            throw Error("[" + module + "] " + e.what());
        }
    }

    void check(const std::string& name, bool pass, const std::string& detail)
    {
        checks_.push_back({name, pass, detail});
        log_ << (pass ? "PASS " : "FAIL ") << name << ": " << detail << '\n';
    }

    void write(const std::string& name, const std::string& content)
    {
        const auto path = std::filesystem::path(cfg_.output_dir) / name;
        std::ofstream f(path, std::ios::binary);
        if (!(f << content))
            throw Error("cannot write " + path.string());
        contents_.push_back(content);
        artifacts_.push_back(name);
    }

    void write_manifest(double wall)
    {
        std::ostringstream os;
        os << "config_sha256 " << sha256_hex(canonical_config(cfg_)) << '\n'
           << "seed " << cfg_.seed << '\n'
           << "glorenz " << kVersion << '\n'
           << "compiler " << __VERSION__ << '\n'
           << "boost " << BOOST_LIB_VERSION << '\n'
           << "openssl " << OPENSSL_VERSION_TEXT << '\n';
        for (std::size_t i = 0; i < artifacts_.size(); ++i)
            os << "artifact " << artifacts_[i] << ' ' << sha256_hex(contents_[i]) << '\n';
        // the only line that changes between identical runs
        os << "wall_time_s " << fmt17(wall) << '\n';
        std::ofstream f(std::filesystem::path(cfg_.output_dir) / "manifest.txt", std::ios::binary);
        if (!(f << os.str()))
            throw Error("cannot write manifest");
    }

    ExperimentConfig cfg_;
    std::ostream& log_;
    Parallel par_;
    std::optional<MarkovPartition> part_;
    std::optional<UlamOperator> op_;
    std::optional<DensityResult> dens_;
    std::optional<PhysicalSamples> samples_;
    std::vector<CheckResult> checks_;
    std::vector<std::string> artifacts_, contents_, notes_;
};

}  // namespace glorenz

#endif
