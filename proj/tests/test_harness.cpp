#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include <gtest/gtest.h>

#include "glorenz/pipeline.hpp"

using namespace glorenz;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p)
{
    std::ifstream f(p, std::ios::binary);
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

ExperimentConfig parse(const std::string& text)
{
    std::istringstream is(text);
    return parse_config(is);
}

// Small enough to run the whole pipeline in well under a second.
ExperimentConfig small_config(const fs::path& out, int threads)
{
    auto c = parse(R"(
depth_cap = 20
mass_target = 0.95
allow_shortfall = true
m_bins = 512
nu0_per_bin = 16
birkhoff_iterates = 1e5
ladder_small = 10
ladder_large = 100
tail_L_max = 40
uni_seq_len = 6
n_samples = 2e4
t_max = 10
groups = 16
)");
    c.output_dir = out.string();
    c.threads = threads;
    c.validate();
    return c;
}

fs::path scratch(const std::string& name)
{
    const auto p = fs::temp_directory_path() / ("glorenz_harness_" + name);
    fs::remove_all(p);
    return p;
}

const std::vector<std::string> kArtifacts{"trajectory.csv", "partition.txt", "r_tail.csv", "density.csv", "nu0.csv",
                                          "roof_report.txt", "uni_probe.csv", "correlation.csv", "manifest.txt"};

}  // namespace

TEST(Config, ShippedDefaultLoadsAndMatchesBuiltIns)
{
    const auto cfg = load_config(std::string(GLORENZ_SOURCE_DIR) + "/configs/default.cfg");
    EXPECT_EQ(canonical_config(cfg), canonical_config(ExperimentConfig{}));
    EXPECT_TRUE(cfg.violations().empty());
    EXPECT_EQ(cfg.t_grid().size(), 31u);
    EXPECT_EQ(cfg.observable_pairs().size(), 3u);
}

TEST(Config, SlopeOutsideWindowIsRejected)
{
    auto cfg = parse("a = 2.0\nlambda3 = -0.8\n");
    try {
        cfg.validate();
        FAIL() << "expected ValidationError";
    } catch (const ValidationError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("slope window"), std::string::npos) << msg;
        // window recomputed here: 2^(alpha - 1/2)/alpha < a <= 2^alpha
        const double alpha = 0.8;
        EXPECT_NE(msg.find(fmt17(std::pow(2.0, alpha - 0.5) / alpha)), std::string::npos) << msg;
        EXPECT_NE(msg.find(fmt17(std::pow(2.0, alpha))), std::string::npos) << msg;
    }
    EXPECT_NO_THROW(parse("a = 1.7\n").validate());
}

TEST(Config, EveryViolationIsListed)
{
    auto cfg = parse("a = 2.0\nm_bins = 1\ngroups = 1\n");
    EXPECT_GE(cfg.violations().size(), 3u);
    EXPECT_THROW(parse("pairs = x_bump:nope\n").validate(), ValidationError);
    EXPECT_THROW(parse("hyp_b = 0.6\n").validate(), ValidationError);
}

TEST(Config, ParseErrorsCarryLineNumbers)
{
    auto expect_line = [](const std::string& text, const std::string& needle) {
        try {
            parse(text);
            FAIL() << "expected ParseError for: " << text;
        } catch (const ParseError& e) {
            EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
        }
    };
    expect_line("# c\nseed = 1\nseed = 2\n", "line 3: duplicate key 'seed' (first set on line 2)");
    expect_line("a = 1.6\njust words\n", "line 2: expected key = value");
    expect_line("\n\nbogus = 1\n", "line 3: unknown key 'bogus'");
    expect_line("depth_cap = 4.5\n", "line 1: bad value");
    expect_line("allow_shortfall = maybe\n", "line 1: bad value");
    expect_line(" = 3\n", "line 1: missing key");
}

TEST(Config, CommentsAndBlanksAreIgnored)
{
    const auto c = parse("  # header\n\nseed = 7   # trailing\n depth_cap=12\n");
    EXPECT_EQ(c.seed, 7u);
    EXPECT_EQ(c.depth_cap, 12);
}

TEST(Config, ExecutionKeysStayOutOfTheHash)
{
    ExperimentConfig a, b;
    b.threads = 8;
    b.output_dir = "elsewhere";
    EXPECT_EQ(canonical_config(a), canonical_config(b));
    b.seed = 1;
    EXPECT_NE(canonical_config(a), canonical_config(b));
}

TEST(Seeds, DeterministicAndCollisionFree)
{
    EXPECT_EQ(derive_seed(42, 7), derive_seed(42, 7));
    EXPECT_NE(derive_seed(42, 7), derive_seed(43, 7));
    std::unordered_set<std::uint64_t> seen;
    seen.reserve(2000000);
    for (std::uint64_t i = 0; i < 1000000; ++i)
        seen.insert(derive_seed(20240601, i));
    EXPECT_EQ(seen.size(), 1000000u);
}

TEST(Manifest, Sha256KnownVector)
{
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Commands, ValidateWritesNothing)
{
    const auto out = scratch("validate");
    auto cfg = ExperimentConfig{};
    cfg.output_dir = out.string();
    std::ostringstream log;
    Pipeline p(cfg, log);
    EXPECT_EQ(p.run("validate"), 0);
    EXPECT_FALSE(fs::exists(out));
    EXPECT_NE(log.str().find("resonance"), std::string::npos);
}

TEST(Commands, UnknownCommandIsAnError)
{
    std::ostringstream log;
    Pipeline p(ExperimentConfig{}, log);
    EXPECT_EQ(p.run("frobnicate"), 1);
}

TEST(Commands, AllWritesEveryArtifactWithHashes)
{
    const auto out = scratch("all");
    std::ostringstream log;
    Pipeline p(small_config(out, 1), log);
    const int rc = p.run("all");
    EXPECT_TRUE(rc == 0 || rc == 2) << log.str();
    for (const auto& a : kArtifacts)
        EXPECT_TRUE(fs::exists(out / a)) << a;
    const std::string manifest = slurp(out / "manifest.txt");
    for (const auto& a : kArtifacts) {
        if (a == "manifest.txt")
            continue;
        EXPECT_NE(manifest.find("artifact " + a + " " + sha256_hex(slurp(out / a))), std::string::npos) << a;
    }
    EXPECT_NE(manifest.find("config_sha256 " + sha256_hex(canonical_config(p.config()))), std::string::npos);
    // exit code follows the checks
    bool all_pass = true;
    for (const auto& c : p.checks())
        all_pass = all_pass && c.pass;
    EXPECT_EQ(rc, all_pass ? 0 : 2);
    // every decimal in the CSVs round-trips: 17 significant digits
    std::istringstream d(slurp(out / "density.csv"));
    std::string line;
    std::getline(d, line);
    std::getline(d, line);
    const double v = std::stod(line.substr(line.find(',') + 1));
    EXPECT_EQ(fmt17(v), line.substr(line.find(',') + 1));
}

TEST(Commands, ThreadCountDoesNotChangeBytes)
{
    const auto o1 = scratch("t1"), o8 = scratch("t8");
    std::ostringstream log;
    Pipeline a(small_config(o1, 1), log), b(small_config(o8, 8), log);
    a.run("all");
    b.run("all");
    for (const auto& f : kArtifacts) {
        if (f == "manifest.txt")
            continue;
        EXPECT_EQ(slurp(o1 / f), slurp(o8 / f)) << f;
    }
    auto strip_wall = [](std::string m) { return m.substr(0, m.find("wall_time_s")); };
    EXPECT_EQ(strip_wall(slurp(o1 / "manifest.txt")), strip_wall(slurp(o8 / "manifest.txt")));
}

TEST(Commands, ConstantRoofUniIsNegativeControl)
{
    const auto out = scratch("uni");
    auto cfg = small_config(out, 1);
    cfg.roof = "constant";
    cfg.roof_constant = 1.0;
    std::ostringstream log;
    Pipeline p(cfg, log);
    EXPECT_EQ(p.run("uni-check"), 2);
    ASSERT_EQ(p.notes().size(), 1u);
    EXPECT_NE(p.notes()[0].find("NEGATIVE-CONTROL"), std::string::npos);
    EXPECT_NE(slurp(out / "uni_probe.csv").find("NEGATIVE-CONTROL"), std::string::npos);
    EXPECT_EQ(p.artifacts(), std::vector<std::string>{"uni_probe.csv"});
}

TEST(Commands, ModuleErrorsAreQualified)
{
    const auto out = scratch("err");
    auto cfg = small_config(out, 1);
    cfg.uni_seq_len = 14;  // runs past the resolved cells of the shallow partition
    std::ostringstream log;
    Pipeline p(cfg, log);
    EXPECT_EQ(p.run("uni-check"), 1);
    EXPECT_NE(log.str().find("error: [roof_and_uni]"), std::string::npos) << log.str();
}

TEST(Commands, SavedPartitionIsReused)
{
    const auto out = scratch("reuse");
    std::ostringstream log;
    Pipeline a(small_config(out, 1), log);
    a.run("induce");
    auto cfg = small_config(out / "second", 1);
    cfg.partition_file = (out / "partition.txt").string();
    Pipeline b(cfg, log);
    b.run("induce");
    EXPECT_EQ(slurp(out / "partition.txt"), slurp(out / "second" / "partition.txt"));
}
