#include "fedtsa/harness.hpp"

#include <algorithm>
#include <fstream>
#include <ostream>

#include "fedtsa/error.hpp"
#include "fedtsa/model_zoo.hpp"
#include "fedtsa/rng.hpp"

namespace fedtsa {

using nlohmann::json;

namespace {

std::ofstream open_output(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(path.string() + ": cannot open for writing");
    return out;
}

void write_line(std::ofstream& out, const std::filesystem::path& path, const std::string& line) {
    out << line << '\n';
    out.flush();
    if (!out) throw std::runtime_error(path.string() + ": write failed");
}

std::string number(double v) { return json(v).dump(); }

} // namespace

std::vector<ClientProfile> build_profiles(const ExperimentConfig& c) {
    std::vector<ClientProfile> profiles(c.clients.count);
    for (std::size_t k = 0; k < profiles.size(); ++k) {
        profiles[k].client_id = k;
        if (!c.clients.speed_factors.empty()) profiles[k].speed_factor = c.clients.speed_factors[k];
    }
    if (!c.clients.durations_file.empty())
        return apply_durations(std::move(profiles), read_durations_file(c.clients.durations_file));
    return measure_durations(std::move(profiles), c.clients.proxy_workload, c.clients.proxy_noise_sd,
                             derive_seed(c.seed, {kProfileStream}));
}

std::unique_ptr<PreparedRun> prepare_run(const ExperimentConfig& config) {
    validate_config(config);
    auto run = std::make_unique<PreparedRun>();
    run->config = config;
    const auto& c = run->config;

    BlobsOptions blobs = c.dataset.blobs;
    blobs.seed = derive_seed(c.seed, {kDataStream});
    run->dataset = load_dataset(c.dataset.source, blobs);

    // The holdout is reserved whatever the source, so every algorithm and
    // distillation source trains on the same client data.
    run->split = split_dataset(run->dataset, c.dataset.test_fraction, c.training.distill_count, c.seed);
    run->partition = c.dataset.partition == PartitionMode::iid
                         ? partition_iid(run->dataset, run->split.train, c.clients.count, c.seed)
                         : partition_dirichlet(run->dataset, run->split.train, c.clients.count,
                                               c.dataset.dirichlet_alpha, c.seed);
    run->partition.reserved = run->split.holdout;
    run->partition.reserved.insert(run->partition.reserved.end(), run->split.test.begin(), run->split.test.end());
    check_partition(run->partition, run->dataset.size());

    run->profiles = build_profiles(c);
    const auto durations = durations_of(run->profiles);
    run->estimate = kde_density(durations, c.clustering.bandwidth, c.clustering.bandwidth_rule);
    run->assignment = assign_pruning_rates(cluster_by_density(run->estimate, durations), c.clustering.rate_ladder);

    run->base_spec = c.model.arch == "cnn" ? cnn_base(run->dataset.feature_shape, c.model.conv_channels,
                                                      c.model.dense_hidden, run->dataset.class_count)
                                           : mlp_base(run->dataset.feature_shape, c.model.hidden,
                                                      run->dataset.class_count);
    if (c.training.algorithm == Algorithm::fedtsa) {
        run->distillation.emplace(c.distillation.source, run->dataset, run->split.holdout);
        // Fail before training if the source cannot serve the pool.
        run->distillation->draw(c.training.distill_count, derive_seed(c.seed, {kDistillStream, 0}));
    }
    return run;
}

ExperimentInputs PreparedRun::inputs() const {
    ExperimentInputs in;
    in.config = config.training;
    in.base_spec = base_spec;
    in.dataset = &dataset;
    in.partition = partition;
    in.test = split.test;
    in.profiles = profiles;
    in.assignment = assignment;
    in.distillation = distillation ? &*distillation : nullptr;
    return in;
}

json run_record(const PreparedRun& run) {
    json record;
    record["algorithm"] = to_string(run.config.training.algorithm);
    record["clustering"] = cluster_report(run.assignment, run.estimate, run.profiles);
    record["clustering"]["bandwidth_rule"] = to_string(run.config.clustering.bandwidth_rule);
    record["dataset"] = {{"name", run.dataset.name},
                         {"examples", run.dataset.size()},
                         {"classes", run.dataset.class_count},
                         {"feature_shape", run.dataset.feature_shape},
                         {"train", run.split.train.size()},
                         {"holdout", run.split.holdout.size()},
                         {"test", run.split.test.size()},
                         {"mean_label_entropy", mean_label_entropy(run.dataset, run.partition)}};
    json clients = json::array();
    for (std::size_t k = 0; k < run.partition.client_count(); ++k)
        clients.push_back({{"id", k}, {"examples", run.partition.clients[k].size()}});
    record["clients"] = clients;
    json models = json::array();
    for (const auto& c : initial_clusters(run.inputs()))
        models.push_back({{"cluster", c.id},
                          {"pruning_rate", c.spec.pruning_rate},
                          {"parameters", parameter_count(c.spec)},
                          {"members", c.members}});
    record["models"] = models;
    return record;
}

json metrics_to_json(const RoundMetrics& m) {
    return {{"round", m.round},
            {"cluster_accuracy", m.cluster_accuracy},
            {"client_weighted_accuracy", m.client_weighted_accuracy},
            {"cluster_mean_accuracy", m.cluster_mean_accuracy},
            {"data_weighted_accuracy", m.data_weighted_accuracy},
            {"mean_local_loss", m.mean_local_loss},
            {"stage2_kl_loss", m.stage2_kl_loss},
            {"simulated_seconds", m.simulated_seconds}};
}

ExperimentResult run(const ExperimentConfig& config) {
    const auto prepared = prepare_run(config);
    const auto& c = prepared->config;
    const std::filesystem::path dir = c.output.directory;
    std::filesystem::create_directories(dir);
    const bool jsonl = std::find(c.output.formats.begin(), c.output.formats.end(), "jsonl") != c.output.formats.end();
    const bool csv = std::find(c.output.formats.begin(), c.output.formats.end(), "csv") != c.output.formats.end();

    {
        auto out = open_output(dir / "config.json");
        out << dump_config(c);
        auto rec = open_output(dir / "run.json");
        rec << run_record(*prepared).dump(2) << '\n';
    }

    std::ofstream metrics;
    if (jsonl) metrics = open_output(dir / "metrics.jsonl");
    auto timing = open_output(dir / "timing.jsonl");
    const auto result = run_experiment(prepared->inputs(), [&](const RoundMetrics& m) {
        if (jsonl) write_line(metrics, dir / "metrics.jsonl", metrics_to_json(m).dump());
        write_line(timing, dir / "timing.jsonl", json{{"round", m.round}, {"wall_seconds", m.wall_seconds}}.dump());
    });

    if (csv) {
        auto out = open_output(dir / "summary.csv");
        out << "algorithm,rounds,client_weighted_accuracy,cluster_mean_accuracy,data_weighted_accuracy,"
               "cluster_accuracy,total_simulated_seconds\n";
        double total = 0.0;
        for (const auto& m : result.rounds) total += m.simulated_seconds;
        out << to_string(c.training.algorithm) << ',' << result.rounds.size() << ',';
        if (result.rounds.empty()) {
            out << ",,,";
        } else {
            const auto& last = result.rounds.back();
            out << number(last.client_weighted_accuracy) << ',' << number(last.cluster_mean_accuracy) << ','
                << number(last.data_weighted_accuracy) << ',';
            for (std::size_t i = 0; i < last.cluster_accuracy.size(); ++i)
                out << (i ? ";" : "") << number(last.cluster_accuracy[i]);
        }
        out << ',' << number(total) << '\n';
        if (!out) throw std::runtime_error((dir / "summary.csv").string() + ": write failed");
    }
    return result;
}

int run_command(const ExperimentConfig& config, std::ostream& err) {
    try {
        run(config);
        return 0;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }
}

} // namespace fedtsa
