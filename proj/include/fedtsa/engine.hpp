#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fedtsa/clustering.hpp"
#include "fedtsa/data.hpp"
#include "fedtsa/nn.hpp"

namespace fedtsa {

enum class Algorithm { fedtsa, fedavg, fedprox, heterofl };
enum class LossMode { kl_only, ce_only, combined };
enum class Stage1Weighting { uniform, data_size };
// consensus_target: D_KL(consensus || model); model_target: D_KL(model || consensus).
enum class KlDirection { consensus_target, model_target };
// sum: summed over distillation rows; batchmean: that sum divided by the row count.
enum class KlReduction { sum, batchmean };

std::string to_string(Algorithm a);
std::string to_string(LossMode m);
std::string to_string(Stage1Weighting w);
std::string to_string(KlDirection d);
std::string to_string(KlReduction r);
Algorithm algorithm_from_string(const std::string& s);
LossMode loss_mode_from_string(const std::string& s);
Stage1Weighting stage1_weighting_from_string(const std::string& s);
KlDirection kl_direction_from_string(const std::string& s);
KlReduction kl_reduction_from_string(const std::string& s);

struct FedConfig {
    Algorithm algorithm = Algorithm::fedtsa;
    std::size_t rounds = 100;
    std::size_t clients = 20;
    std::size_t local_epochs = 100;
    std::size_t batch_size = 100;
    double learning_rate = 0.03;
    double temperature = 5.0;
    std::size_t global_epochs = 1;
    LossMode loss_mode = LossMode::kl_only;
    double loss_alpha = 1.0;  // weight of the KL term in combined mode
    std::size_t distill_count = 200;
    std::size_t distill_batch_size = 100;
    bool resample_distillation = false;
    Stage1Weighting stage1_weighting = Stage1Weighting::uniform;
    KlDirection kl_direction = KlDirection::consensus_target;
    KlReduction kl_reduction = KlReduction::batchmean;
    bool kl_temperature_squared = false;
    bool leave_self_out = false;
    double fedprox_mu = 0.01;
    double fedavg_rate = 1.0;  // pruning rate of the single homogeneous model (fedavg/fedprox)
    std::size_t threads = 1;
    std::uint64_t seed = 0;
};

// Throws ValidationError on the first violated invariant.
void validate(const FedConfig& config);

struct ClusterState {
    std::size_t id = 0;
    ModelSpec spec;
    ModelParams params;
    std::vector<std::size_t> members;  // client ids
};

struct LocalResult {
    ModelParams params;
    double mean_loss = 0.0;  // mean per-batch training loss over all epochs
};

// E epochs of shuffled mini-batch SGD on cross-entropy starting from `start`;
// with proximal_mu > 0 adds (mu/2)||w - start||^2 per batch.
LocalResult local_update(const ModelSpec& spec, const ModelParams& start, const LabeledDataset& ds,
                         std::span<const std::size_t> indices, std::size_t epochs, std::size_t batch_size,
                         double learning_rate, double proximal_mu, std::uint64_t seed);

// Weighted average of same-shape parameter sets; `sizes` are only read in data_size mode.
ModelParams stage1_aggregate(std::span<const ModelParams> models, Stage1Weighting weighting,
                             std::span<const double> sizes = {});

struct Stage2Report {
    double mean_kl = 0.0;  // mean over (epoch, batch, cluster) of the KL term before the step
    std::size_t steps = 0;
};

// Server-side mutual learning over the distillation batches.
Stage2Report stage2_dml(std::vector<ClusterState>& clusters, std::span<const Tensor> batches, const FedConfig& config);

// Splits a distillation pool into consecutive mini-batches of at most batch_size rows.
std::vector<Tensor> split_batches(const Tensor& pool, std::size_t batch_size);

// Coordinate-wise mean over the clients covering each coordinate; uncovered
// coordinates keep their value in `global`.
ModelParams heterofl_aggregate(const ModelSpec& global_spec, const ModelParams& global,
                               std::span<const ModelParams> client_params, std::span<const ModelSpec> client_specs);

// Fraction of examples whose argmax logit equals the label (first max wins ties).
double evaluate(const ModelSpec& spec, const ModelParams& params, const LabeledDataset& ds,
                std::span<const std::size_t> indices);

struct RoundMetrics {
    std::size_t round = 0;
    std::vector<double> cluster_accuracy;
    double client_weighted_accuracy = 0.0;  // headline: mean over clients of their model's accuracy
    double cluster_mean_accuracy = 0.0;     // clusters weighted equally
    double data_weighted_accuracy = 0.0;    // clusters weighted by training examples
    double mean_local_loss = 0.0;
    double stage2_kl_loss = 0.0;
    double simulated_seconds = 0.0;  // slowest client's local work this round
    double wall_seconds = 0.0;       // not part of the deterministic record
};

struct ExperimentInputs {
    FedConfig config;
    ModelSpec base_spec;
    const LabeledDataset* dataset = nullptr;
    Partition partition;                   // client k holds partition.clients[k]
    std::vector<std::size_t> test;         // indices into dataset
    std::vector<ClientProfile> profiles;   // client k is profiles[k]
    ClusterAssignment assignment;          // over profiles, with pruning rates
    const DistillationSource* distillation = nullptr;
};

struct ExperimentResult {
    std::vector<RoundMetrics> rounds;
    std::vector<ClusterState> clusters;  // final cluster models (heterofl: extracted submodels)
};

using RoundCallback = std::function<void(const RoundMetrics&)>;

ExperimentResult run_experiment(const ExperimentInputs& inputs, const RoundCallback& on_round = {});

// Cluster layout the algorithm trains: fedtsa/heterofl follow `assignment`,
// fedavg/fedprox put every client in one cluster at config.fedavg_rate.
std::vector<ClusterState> initial_clusters(const ExperimentInputs& inputs);

} // namespace fedtsa
