#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fedtsa/tensor.hpp"

namespace fedtsa {

// Examples are stored contiguously: example i occupies
// features[i * feature_size(), (i + 1) * feature_size()).
struct LabeledDataset {
    std::string name;
    Shape feature_shape;
    std::size_t class_count = 0;
    std::vector<std::string> class_names;
    std::vector<double> features;
    std::vector<std::size_t> labels;

    std::size_t size() const { return labels.size(); }
    std::size_t feature_size() const { return shape_size(feature_shape); }
    std::span<const double> example(std::size_t i) const {
        return {features.data() + i * feature_size(), feature_size()};
    }
};

void validate_dataset(const LabeledDataset& ds);

// Procedural Gaussian-cluster classification. Each class owns
// `modes_per_class` centers drawn uniformly in [-center_range, center_range]^d;
// examples are center + Normal(0, noise_sd) per coordinate.
struct BlobsOptions {
    std::size_t classes = 4;
    std::size_t per_class = 200;
    Shape shape{16};
    std::size_t modes_per_class = 1;
    double center_range = 1.0;
    double noise_sd = 0.5;
    std::uint64_t seed = 0;
};

LabeledDataset make_blobs(const BlobsOptions& options);

// Directory of class folders, each holding NetPBM images (.pgm/.ppm/.pbm).
// Class order is the sorted folder-name order.
LabeledDataset load_image_directory(const std::filesystem::path& root);

// "blobs" selects the builtin generator, anything else is a directory path.
LabeledDataset load_dataset(const std::string& source, const BlobsOptions& blobs = {});

// Stacks the selected examples into a [n, feature_shape...] batch.
Tensor gather_features(const LabeledDataset& ds, std::span<const std::size_t> indices);
std::vector<std::size_t> gather_labels(const LabeledDataset& ds, std::span<const std::size_t> indices);

// Disjoint, stratified train / distillation-holdout / test index sets.
struct DatasetSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> holdout;
    std::vector<std::size_t> test;
};

// test_fraction of every class goes to test; holdout_count examples
// (class-balanced) are reserved for distillation; the rest is train.
DatasetSplit split_dataset(const LabeledDataset& ds, double test_fraction, std::size_t holdout_count,
                           std::uint64_t seed);

struct Partition {
    std::vector<std::vector<std::size_t>> clients;
    std::vector<std::size_t> reserved;  // excluded from every client, e.g. the distillation holdout

    std::size_t client_count() const { return clients.size(); }
};

// Stratified deal: class-sorted shuffled indices are dealt round-robin.
Partition partition_iid(const LabeledDataset& ds, std::span<const std::size_t> indices, std::size_t clients,
                        std::uint64_t seed);
Partition partition_iid(const LabeledDataset& ds, std::size_t clients, std::uint64_t seed);

// Per class, client shares ~ Dir(alpha); empty clients take one example from
// the currently largest client.
Partition partition_dirichlet(const LabeledDataset& ds, std::span<const std::size_t> indices, std::size_t clients,
                              double alpha, std::uint64_t seed);
Partition partition_dirichlet(const LabeledDataset& ds, std::size_t clients, double alpha, std::uint64_t seed);

// Throws ValidationError unless clients are non-empty, pairwise disjoint and
// disjoint from `reserved`.
void check_partition(const Partition& partition, std::size_t dataset_size);

enum class DistillationKind { holdout, directory, noise };

std::string to_string(DistillationKind kind);
DistillationKind distillation_kind_from_string(const std::string& s);

struct DistillationSourceConfig {
    DistillationKind kind = DistillationKind::holdout;
    std::vector<std::string> prompts;
    std::filesystem::path directory;
    double noise_low = 0.0;
    double noise_high = 1.0;
};

// Unlabeled inputs for server-side mutual learning.
struct DistillationBatch {
    Tensor features;  // [n, feature_shape...]
    std::vector<std::string> prompts;
    DistillationKind kind = DistillationKind::holdout;
    std::vector<std::size_t> source_indices;  // dataset indices (holdout) or file order (directory)

    std::size_t size() const { return features.rank() ? features.dim(0) : 0; }
};

class DistillationSource {
public:
    // `holdout` indexes into `dataset`; both must outlive the source.
    DistillationSource(DistillationSourceConfig config, const LabeledDataset& dataset,
                       std::vector<std::size_t> holdout);

    DistillationBatch draw(std::size_t n, std::uint64_t seed) const;

    const DistillationSourceConfig& config() const { return config_; }

private:
    DistillationBatch draw_holdout(std::size_t n, std::uint64_t seed) const;
    DistillationBatch draw_directory(std::size_t n, std::uint64_t seed) const;
    DistillationBatch draw_noise(std::size_t n, std::uint64_t seed) const;

    DistillationSourceConfig config_;
    const LabeledDataset* dataset_;
    std::vector<std::size_t> holdout_;
};

// Classes whose name occurs as a whole word in any prompt (case-insensitive).
std::vector<std::size_t> classes_named_in_prompts(const std::vector<std::string>& class_names,
                                                  const std::vector<std::string>& prompts);

// Mean Shannon entropy (nats) of per-client label distributions.
double mean_label_entropy(const LabeledDataset& ds, const Partition& partition);

} // namespace fedtsa
