#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "glorenz/pipeline.hpp"

using namespace glorenz;

int main(int argc, char** argv)
{
    CLI::App app{"Geometric Lorenz flow laboratory"};
    std::string command, config_path, out_dir;
    std::vector<std::string> overrides;
    int threads = 0;
    app.add_option("command", command, "validate | simulate | induce | density | roof-check | uni-check | correlation | all")
        ->required()
        ->check(CLI::IsMember(known_commands()));
    app.add_option("-c,--config", config_path, "key = value config file (defaults when omitted)");
    app.add_option("-s,--set", overrides, "override a config key, key=value (repeatable)");
    app.add_option("-t,--threads", threads, "worker threads (does not change results)")->check(CLI::PositiveNumber);
    app.add_option("-o,--out", out_dir, "output directory");
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    ExperimentConfig cfg;
    try {
        if (!config_path.empty()) {
            std::ifstream f(config_path);
            if (!f)
                throw ParseError("cannot open config file '" + config_path + "'");
            cfg = parse_config(f);
        }
        for (const auto& o : overrides) {
            const auto eq = o.find('=');
            if (eq == std::string::npos)
                throw ParseError("--set expects key=value, got '" + o + "'");
            set_config_key(cfg, o.substr(0, eq), o.substr(eq + 1), "--set");
        }
        if (threads > 0)
            cfg.threads = threads;
        if (!out_dir.empty())
            cfg.output_dir = out_dir;
        cfg.validate();
    } catch (const Error& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    }

    Pipeline p(cfg, std::cout);
    const int rc = p.run(command);
    for (const auto& n : p.notes())
        std::cout << n << '\n';
    std::cout << "exit " << rc << '\n';
    return rc;
}
