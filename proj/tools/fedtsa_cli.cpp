// fedtsa: run, profile and cluster subcommands over a JSON experiment config.
#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>

#include "fedtsa/config.hpp"
#include "fedtsa/error.hpp"
#include "fedtsa/harness.hpp"

namespace {

struct Overrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::string> algo;
    std::optional<std::size_t> threads;
};

fedtsa::ExperimentConfig load(const std::string& path, const Overrides& o) {
    auto c = fedtsa::parse_config_file(path);
    if (o.seed) c.seed = c.training.seed = *o.seed;
    if (o.out) c.output.directory = *o.out;
    if (o.threads) c.training.threads = *o.threads;
    if (o.algo) {
        try {
            c.training.algorithm = fedtsa::algorithm_from_string(*o.algo);
        } catch (const fedtsa::ValidationError& e) {
            throw fedtsa::ConfigError(std::string("--algo: ") + e.what());
        }
    }
    fedtsa::validate_config(c);
    return c;
}

// Writes to `path`, or stdout when empty.
void emit(const std::string& path, const std::string& text) {
    if (path.empty()) {
        std::cout << text;
        return;
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out || !(out << text)) throw std::runtime_error(path + ": cannot write");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated training simulator with resource-aware clustering and two-stage aggregation"};
    app.require_subcommand(1);

    std::string config_path;
    Overrides overrides;
    std::string target;

    auto* run = app.add_subcommand("run", "Train and write config.json, run.json, metrics.jsonl, summary.csv");
    run->add_option("--config", config_path, "Experiment config (JSON)")->required();
    run->add_option("--seed", overrides.seed, "Override the master seed");
    run->add_option("--out", overrides.out, "Override output.directory");
    run->add_option("--algo", overrides.algo, "fedtsa | fedavg | fedprox | heterofl");
    run->add_option("--threads", overrides.threads, "Worker threads for local updates");

    auto* profile = app.add_subcommand("profile", "Run the proxy task and emit a durations file");
    profile->add_option("--config", config_path, "Experiment config (JSON)")->required();
    profile->add_option("--seed", overrides.seed, "Override the master seed");
    profile->add_option("--out", target, "Durations file to write (default: stdout)");

    auto* cluster = app.add_subcommand("cluster", "Print the clustering report without training");
    cluster->add_option("--config", config_path, "Experiment config (JSON)")->required();
    cluster->add_option("--seed", overrides.seed, "Override the master seed");
    cluster->add_option("--out", target, "Report file to write (default: stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        const auto config = load(config_path, overrides);
        if (*run) return fedtsa::run_command(config, std::cerr);
        const auto profiles = fedtsa::build_profiles(config);
        if (*profile) {
            if (target.empty()) {
                for (const auto& p : profiles)
                    std::cout << p.client_id << ',' << nlohmann::json(*p.measured_duration).dump() << '\n';
            } else {
                fedtsa::write_durations_file(target, profiles);
            }
            return 0;
        }
        const auto durations = fedtsa::durations_of(profiles);
        const auto estimate =
            fedtsa::kde_density(durations, config.clustering.bandwidth, config.clustering.bandwidth_rule);
        const auto assignment = fedtsa::assign_pruning_rates(fedtsa::cluster_by_density(estimate, durations),
                                                             config.clustering.rate_ladder);
        emit(target, fedtsa::cluster_report(assignment, estimate, profiles).dump(2) + "\n");
        return 0;
    } catch (const fedtsa::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
