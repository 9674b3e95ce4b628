#include <CLI11.hpp>

#include <iostream>

#include "experiment.hpp"

using namespace wassoed;
using namespace wassoed::cli;

namespace {

struct Flags {
    std::string config;
    std::string out;
    std::uint64_t seed = 0;
    bool has_seed = false;
    int threads = 0;
};

ExperimentConfig resolve(const Flags& f, std::initializer_list<const char*> allowed) {
    ExperimentConfig c = load_config(f.config);
    // flags override top-level scalars
    if (!f.out.empty()) c.resolved["out"] = f.out;
    if (f.has_seed) c.resolved["seed"] = f.seed;
    if (f.threads > 0) c.resolved["threads"] = f.threads;
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return c.experiment() == a; }))
        throw ParseError("experiment '" + c.experiment() + "' does not belong to this subcommand");
    return c;
}

int report(const std::vector<Check>& checks) {
    bool all = true;
    for (const auto& ch : checks) {
        std::cout << (ch.pass ? "PASS " : "FAIL ") << ch.name << (ch.detail.empty() ? "" : ": " + ch.detail) << '\n';
        all = all && ch.pass;
    }
    return all ? kOk : kThreshold;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Wasserstein-utility optimal experimental design"};
    app.require_subcommand(1);
    app.set_version_flag("--version", WASSOED_VERSION);
    Flags flags;
    const auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", flags.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
        sub->add_option("--out", flags.out, "output directory");
        sub->add_option("--seed", flags.seed, "base seed")->each([&](const std::string&) { flags.has_seed = true; });
        sub->add_option("--threads", flags.threads, "worker threads")->check(CLI::PositiveNumber);
    };
    auto* grid = app.add_subcommand("grid", "evaluate utilities on a design grid");
    auto* conv = app.add_subcommand("converge", "empirical-prior U1 convergence study");
    auto* dist = app.add_subcommand("distance", "Wasserstein distance between two measures");
    auto* trans = app.add_subcommand("transport", "optimal transport map between two densities");
    auto* self = app.add_subcommand("selfcheck", "run an experiment and check its thresholds");
    for (auto* s : {grid, conv, dist, trans, self}) add_common(s);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (grid->parsed()) {
            const auto c = resolve(flags, {"linear1d-utility", "example1-grid", "example2-grid"});
            const auto run = run_utility_grid(c);
            for (const auto& g : run.grids)
                if (g.failures()) std::cerr << g.criterion << ": " << g.failures() << " failed cells\n";
            return run.exit_code;
        }
        if (conv->parsed()) {
            const auto c = resolve(flags, {"linear1d-convergence"});
            const auto run = run_convergence_study(c);
            for (auto [t, s] : run.slopes) std::cout << "theta " << num(t) << " slope " << num(s) << '\n';
            return kOk;
        }
        if (dist->parsed()) {
            run_distance(resolve(flags, {"distance"}), std::cout);
            return kOk;
        }
        if (trans->parsed()) {
            run_transport(resolve(flags, {"transport"}), std::cout);
            return kOk;
        }
        const auto c = resolve(flags, {"linear1d-utility", "example1-grid", "example2-grid", "linear1d-convergence",
                                       "distance", "transport"});
        return report(selfcheck(c));
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const ArgumentError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kNumeric;
    }
}
