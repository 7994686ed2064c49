#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedtsa/clustering.hpp"
#include "fedtsa/data.hpp"
#include "fedtsa/engine.hpp"

namespace fedtsa {

enum class PartitionMode { iid, dirichlet };

struct DatasetConfig {
    std::string source = "blobs";  // "blobs" or a directory of class folders
    BlobsOptions blobs;             // seed is derived from the master seed
    double test_fraction = 0.2;
    PartitionMode partition = PartitionMode::iid;
    double dirichlet_alpha = 0.6;  // data heterogeneity, unrelated to training.loss_alpha
};

struct ModelConfig {
    std::string arch = "mlp";  // mlp | cnn
    std::vector<std::size_t> hidden{128, 64};
    std::vector<std::size_t> conv_channels{16, 32};
    std::size_t dense_hidden = 64;
};

struct ClientsConfig {
    std::size_t count = 20;
    std::vector<double> speed_factors;  // empty: every client at 1.0
    std::string durations_file;         // non-empty: skip the proxy task, read durations
    double proxy_workload = 10.0;
    double proxy_noise_sd = 0.02;
};

struct ClusteringConfig {
    std::optional<double> bandwidth;
    BandwidthRule bandwidth_rule = BandwidthRule::isj;
    std::vector<double> rate_ladder;  // empty: raw t_f / t_i rates
};

struct DistillationConfig {
    DistillationSourceConfig source;
};

struct OutputConfig {
    std::string directory = "runs/latest";
    std::vector<std::string> formats{"jsonl", "csv"};
};

// Training hyper-parameters live in `training`; its `clients` and `seed`
// fields mirror clients.count and the top-level seed.
struct ExperimentConfig {
    std::string description;  // free text, echoed only
    std::uint64_t seed = 0;
    DatasetConfig dataset;
    ModelConfig model;
    ClientsConfig clients;
    ClusteringConfig clustering;
    FedConfig training;
    DistillationConfig distillation;
    OutputConfig output;
};

std::string to_string(PartitionMode mode);

// Strict parse: unknown keys, wrong types and out-of-range values raise
// ConfigError naming the field path; syntax errors name the line.
ExperimentConfig parse_config_text(const std::string& text, const std::string& origin = "<config>");
ExperimentConfig parse_config_file(const std::filesystem::path& path);

// Resolved config with every default spelled out; parsing it yields the same config.
nlohmann::json config_to_json(const ExperimentConfig& config);
std::string dump_config(const ExperimentConfig& config);

// Semantic checks shared by the parser and programmatic callers.
void validate_config(const ExperimentConfig& config);

} // namespace fedtsa
