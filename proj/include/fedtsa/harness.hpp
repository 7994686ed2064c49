#pragma once

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>

#include <json.hpp>

#include "fedtsa/config.hpp"
#include "fedtsa/engine.hpp"

namespace fedtsa {

// Everything a run needs, built and validated before any output is written.
// Not movable: the distillation source points into `dataset`.
struct PreparedRun {
    ExperimentConfig config;
    LabeledDataset dataset;
    DatasetSplit split;
    Partition partition;
    std::vector<ClientProfile> profiles;
    DensityEstimate estimate;
    ClusterAssignment assignment;
    ModelSpec base_spec;
    std::optional<DistillationSource> distillation;

    PreparedRun() = default;
    PreparedRun(const PreparedRun&) = delete;
    PreparedRun& operator=(const PreparedRun&) = delete;

    ExperimentInputs inputs() const;
};

// Profiles from speed factors (proxy task) or the durations file, in client order.
std::vector<ClientProfile> build_profiles(const ExperimentConfig& config);

// Loads data, partitions, profiles and clusters clients.
std::unique_ptr<PreparedRun> prepare_run(const ExperimentConfig& config);

nlohmann::json run_record(const PreparedRun& run);
nlohmann::json metrics_to_json(const RoundMetrics& metrics);

// Files written under config.output.directory:
//   config.json    resolved config echo
//   run.json       cluster report and dataset sizes
//   metrics.jsonl  one object per completed round ("jsonl" format)
//   summary.csv    header plus one row ("csv" format)
//   timing.jsonl   wall-clock seconds per round, kept apart from metrics
ExperimentResult run(const ExperimentConfig& config);

// Maps exceptions to exit codes: 0 ok, 1 config error, 2 runtime error.
int run_command(const ExperimentConfig& config, std::ostream& err);

} // namespace fedtsa
