#include "fedtsa/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numeric>
#include <set>

#include "fedtsa/error.hpp"
#include "fedtsa/netpbm.hpp"
#include "fedtsa/rng.hpp"

namespace fedtsa {

namespace fs = std::filesystem;

namespace {

std::vector<std::vector<std::size_t>> group_by_class(const LabeledDataset& ds, std::span<const std::size_t> indices) {
    std::vector<std::vector<std::size_t>> groups(ds.class_count);
    for (std::size_t i : indices) {
        if (i >= ds.size()) throw ValidationError("index " + std::to_string(i) + " outside dataset");
        groups[ds.labels[i]].push_back(i);
    }
    return groups;
}

std::vector<std::size_t> all_indices(const LabeledDataset& ds) {
    std::vector<std::size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
}

std::vector<fs::path> sorted_images(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_regular_file() && is_netpbm_path(entry.path())) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    return files;
}

std::string lowercase(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
    return s;
}

} // namespace

void validate_dataset(const LabeledDataset& ds) {
    if (ds.size() == 0) throw ValidationError("dataset '" + ds.name + "' is empty");
    if (ds.class_count < 2) throw ValidationError("dataset '" + ds.name + "' needs at least 2 classes");
    if (ds.feature_shape.empty() || ds.feature_size() == 0)
        throw ValidationError("dataset '" + ds.name + "' has an empty feature shape");
    if (ds.features.size() != ds.size() * ds.feature_size())
        throw ValidationError("dataset '" + ds.name + "' feature storage does not match its shape");
    if (!ds.class_names.empty() && ds.class_names.size() != ds.class_count)
        throw ValidationError("dataset '" + ds.name + "' class names do not match the class count");
    for (std::size_t i = 0; i < ds.size(); ++i)
        if (ds.labels[i] >= ds.class_count)
            throw ValidationError("dataset '" + ds.name + "' record " + std::to_string(i) + " has label " +
                                  std::to_string(ds.labels[i]) + " >= " + std::to_string(ds.class_count));
}

LabeledDataset make_blobs(const BlobsOptions& o) {
    if (o.classes < 2) throw ValidationError("blobs: classes must be >= 2");
    if (o.per_class == 0) throw ValidationError("blobs: per_class must be >= 1");
    if (o.modes_per_class == 0) throw ValidationError("blobs: modes_per_class must be >= 1");
    if (o.shape.empty() || shape_size(o.shape) == 0) throw ValidationError("blobs: shape must be non-empty");
    if (!(o.noise_sd >= 0.0) || !(o.center_range >= 0.0))
        throw ValidationError("blobs: noise_sd and center_range must be >= 0");

    Rng rng(derive_seed(o.seed, {kDataStream}));
    const std::size_t dims = shape_size(o.shape);
    std::uniform_real_distribution<double> center_dist(-o.center_range, o.center_range);
    std::vector<double> centers(o.classes * o.modes_per_class * dims);
    for (double& c : centers) c = center_dist(rng);

    LabeledDataset ds;
    ds.name = "blobs";
    ds.feature_shape = o.shape;
    ds.class_count = o.classes;
    for (std::size_t c = 0; c < o.classes; ++c) ds.class_names.push_back("class" + std::to_string(c));
    ds.features.reserve(o.classes * o.per_class * dims);
    std::normal_distribution<double> noise(0.0, 1.0);
    // Interleave classes so any prefix of the dataset is roughly balanced.
    for (std::size_t j = 0; j < o.per_class; ++j) {
        for (std::size_t c = 0; c < o.classes; ++c) {
            const std::size_t mode = j % o.modes_per_class;
            const double* center = centers.data() + (c * o.modes_per_class + mode) * dims;
            for (std::size_t d = 0; d < dims; ++d) ds.features.push_back(center[d] + o.noise_sd * noise(rng));
            ds.labels.push_back(c);
        }
    }
    validate_dataset(ds);
    return ds;
}

LabeledDataset load_image_directory(const fs::path& root) {
    if (!fs::is_directory(root)) throw IngestionError("dataset directory not found: " + root.string());
    std::vector<fs::path> class_dirs;
    for (const auto& entry : fs::directory_iterator(root))
        if (entry.is_directory()) class_dirs.push_back(entry.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.size() < 2)
        throw IngestionError("dataset directory " + root.string() + " needs at least 2 class folders");

    LabeledDataset ds;
    ds.name = root.filename().string();
    ds.class_count = class_dirs.size();
    std::size_t record = 0;
    for (std::size_t c = 0; c < class_dirs.size(); ++c) {
        ds.class_names.push_back(class_dirs[c].filename().string());
        for (const auto& file : sorted_images(class_dirs[c])) {
            Tensor image;
            try {
                image = read_netpbm(file);
            } catch (const IngestionError& e) {
                throw IngestionError("record " + std::to_string(record) + ": " + e.what());
            }
            if (ds.feature_shape.empty()) {
                ds.feature_shape = image.shape();
            } else if (image.shape() != ds.feature_shape) {
                throw IngestionError("record " + std::to_string(record) + " (" + file.string() + ") has shape " +
                                     shape_to_string(image.shape()) + ", expected " +
                                     shape_to_string(ds.feature_shape));
            }
            ds.features.insert(ds.features.end(), image.values().begin(), image.values().end());
            ds.labels.push_back(c);
            ++record;
        }
    }
    if (ds.size() == 0) throw IngestionError("dataset directory " + root.string() + " holds no images");
    validate_dataset(ds);
    return ds;
}

LabeledDataset load_dataset(const std::string& source, const BlobsOptions& blobs) {
    if (source == "blobs") return make_blobs(blobs);
    return load_image_directory(source);
}

Tensor gather_features(const LabeledDataset& ds, std::span<const std::size_t> indices) {
    Shape shape{indices.size()};
    shape.insert(shape.end(), ds.feature_shape.begin(), ds.feature_shape.end());
    std::vector<double> values;
    values.reserve(indices.size() * ds.feature_size());
    for (std::size_t i : indices) {
        auto ex = ds.example(i);
        values.insert(values.end(), ex.begin(), ex.end());
    }
    return Tensor(std::move(shape), std::move(values));
}

std::vector<std::size_t> gather_labels(const LabeledDataset& ds, std::span<const std::size_t> indices) {
    std::vector<std::size_t> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(ds.labels[i]);
    return out;
}

DatasetSplit split_dataset(const LabeledDataset& ds, double test_fraction, std::size_t holdout_count,
                           std::uint64_t seed) {
    if (!(test_fraction >= 0.0 && test_fraction < 1.0))
        throw ValidationError("test_fraction must lie in [0,1), got " + std::to_string(test_fraction));
    Rng rng(derive_seed(seed, {kSplitStream}));
    auto groups = group_by_class(ds, all_indices(ds));
    DatasetSplit split;
    for (std::size_t c = 0; c < groups.size(); ++c) {
        auto& g = groups[c];
        std::shuffle(g.begin(), g.end(), rng);
        const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(g.size())));
        const std::size_t n_hold = holdout_count / ds.class_count + (c < holdout_count % ds.class_count ? 1 : 0);
        if (n_test + n_hold > g.size())
            throw ValidationError("class " + std::to_string(c) + " has " + std::to_string(g.size()) +
                                  " examples, cannot reserve " + std::to_string(n_test) + " test and " +
                                  std::to_string(n_hold) + " holdout");
        split.test.insert(split.test.end(), g.begin(), g.begin() + n_test);
        split.holdout.insert(split.holdout.end(), g.begin() + n_test, g.begin() + n_test + n_hold);
        split.train.insert(split.train.end(), g.begin() + n_test + n_hold, g.end());
    }
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.holdout.begin(), split.holdout.end());
    std::sort(split.test.begin(), split.test.end());
    return split;
}

Partition partition_iid(const LabeledDataset& ds, std::span<const std::size_t> indices, std::size_t clients,
                        std::uint64_t seed) {
    if (clients == 0) throw ValidationError("client count must be >= 1");
    if (clients > indices.size())
        throw ValidationError("cannot split " + std::to_string(indices.size()) + " examples across " +
                              std::to_string(clients) + " clients");
    Rng rng(derive_seed(seed, {kPartitionStream}));
    auto groups = group_by_class(ds, indices);
    Partition part;
    part.clients.resize(clients);
    std::size_t dealt = 0;
    for (auto& g : groups) {
        std::shuffle(g.begin(), g.end(), rng);
        for (std::size_t i : g) part.clients[dealt++ % clients].push_back(i);
    }
    for (auto& c : part.clients) std::sort(c.begin(), c.end());
    return part;
}

Partition partition_iid(const LabeledDataset& ds, std::size_t clients, std::uint64_t seed) {
    const auto idx = all_indices(ds);
    return partition_iid(ds, idx, clients, seed);
}

Partition partition_dirichlet(const LabeledDataset& ds, std::span<const std::size_t> indices, std::size_t clients,
                              double alpha, std::uint64_t seed) {
    if (!(alpha > 0.0) || !std::isfinite(alpha))
        throw ValidationError("dirichlet alpha must be a positive finite number, got " + std::to_string(alpha));
    if (clients == 0) throw ValidationError("client count must be >= 1");
    if (clients > indices.size())
        throw ValidationError("cannot split " + std::to_string(indices.size()) + " examples across " +
                              std::to_string(clients) + " non-empty clients");
    Rng rng(derive_seed(seed, {kPartitionStream}));
    auto groups = group_by_class(ds, indices);
    Partition part;
    part.clients.resize(clients);
    std::gamma_distribution<double> gamma(alpha, 1.0);
    std::vector<double> share(clients);
    for (auto& g : groups) {
        std::shuffle(g.begin(), g.end(), rng);
        double total = 0.0;
        for (double& s : share) total += (s = gamma(rng));
        if (!(total > 0.0)) {
            // Every draw underflowed (tiny alpha): the whole class goes to one client.
            std::fill(share.begin(), share.end(), 0.0);
            share[std::uniform_int_distribution<std::size_t>(0, clients - 1)(rng)] = 1.0;
            total = 1.0;
        }
        double cumulative = 0.0;
        std::size_t begin = 0;
        for (std::size_t k = 0; k < clients; ++k) {
            cumulative += share[k];
            const std::size_t end = k + 1 == clients
                                        ? g.size()
                                        : std::min<std::size_t>(g.size(), static_cast<std::size_t>(std::llround(
                                                                              cumulative / total * g.size())));
            for (std::size_t i = begin; i < end; ++i) part.clients[k].push_back(g[i]);
            begin = std::max(begin, end);
        }
    }
    for (std::size_t k = 0; k < clients; ++k) {
        if (!part.clients[k].empty()) continue;
        auto donor = std::max_element(part.clients.begin(), part.clients.end(),
                                      [](const auto& a, const auto& b) { return a.size() < b.size(); });
        part.clients[k].push_back(donor->back());
        donor->pop_back();
    }
    for (auto& c : part.clients) std::sort(c.begin(), c.end());
    return part;
}

Partition partition_dirichlet(const LabeledDataset& ds, std::size_t clients, double alpha, std::uint64_t seed) {
    const auto idx = all_indices(ds);
    return partition_dirichlet(ds, idx, clients, alpha, seed);
}

void check_partition(const Partition& partition, std::size_t dataset_size) {
    std::vector<char> seen(dataset_size, 0);
    for (std::size_t i : partition.reserved) {
        if (i >= dataset_size) throw ValidationError("reserved index out of range");
        seen[i] = 2;
    }
    for (std::size_t k = 0; k < partition.clients.size(); ++k) {
        if (partition.clients[k].empty()) throw ValidationError("client " + std::to_string(k) + " holds no examples");
        for (std::size_t i : partition.clients[k]) {
            if (i >= dataset_size) throw ValidationError("client index out of range");
            if (seen[i] == 2) throw ValidationError("client " + std::to_string(k) + " holds reserved example " +
                                                    std::to_string(i));
            if (seen[i]) throw ValidationError("example " + std::to_string(i) + " assigned twice");
            seen[i] = 1;
        }
    }
}

std::string to_string(DistillationKind kind) {
    switch (kind) {
        case DistillationKind::holdout: return "holdout";
        case DistillationKind::directory: return "directory";
        case DistillationKind::noise: return "noise";
    }
    return "unknown";
}

DistillationKind distillation_kind_from_string(const std::string& s) {
    if (s == "holdout") return DistillationKind::holdout;
    if (s == "directory") return DistillationKind::directory;
    if (s == "noise") return DistillationKind::noise;
    throw ValidationError("unknown distillation source '" + s + "' (holdout|directory|noise)");
}

std::vector<std::size_t> classes_named_in_prompts(const std::vector<std::string>& class_names,
                                                  const std::vector<std::string>& prompts) {
    auto is_word = [](unsigned char ch) { return std::isalnum(ch) || ch == '_'; };
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < class_names.size(); ++c) {
        const std::string name = lowercase(class_names[c]);
        if (name.empty()) continue;
        bool found = false;
        for (const auto& prompt : prompts) {
            const std::string text = lowercase(prompt);
            for (auto pos = text.find(name); pos != std::string::npos && !found; pos = text.find(name, pos + 1)) {
                const bool left = pos == 0 || !is_word(text[pos - 1]);
                const bool right = pos + name.size() == text.size() || !is_word(text[pos + name.size()]);
                found = left && right;
            }
            if (found) break;
        }
        if (found) out.push_back(c);
    }
    return out;
}

DistillationSource::DistillationSource(DistillationSourceConfig config, const LabeledDataset& dataset,
                                       std::vector<std::size_t> holdout)
    : config_(std::move(config)), dataset_(&dataset), holdout_(std::move(holdout)) {}

DistillationBatch DistillationSource::draw(std::size_t n, std::uint64_t seed) const {
    if (n == 0) throw SourceError("distillation batch size must be >= 1");
    DistillationBatch batch;
    switch (config_.kind) {
        case DistillationKind::holdout: batch = draw_holdout(n, seed); break;
        case DistillationKind::directory: batch = draw_directory(n, seed); break;
        case DistillationKind::noise: batch = draw_noise(n, seed); break;
    }
    batch.kind = config_.kind;
    batch.prompts = config_.prompts;
    return batch;
}

DistillationBatch DistillationSource::draw_holdout(std::size_t n, std::uint64_t seed) const {
    if (holdout_.empty()) throw SourceError("holdout source selected but no holdout split was reserved");
    auto wanted = classes_named_in_prompts(dataset_->class_names, config_.prompts);
    std::vector<char> allowed(dataset_->class_count, wanted.empty() ? 1 : 0);
    for (std::size_t c : wanted) allowed[c] = 1;

    auto groups = group_by_class(*dataset_, holdout_);
    std::size_t available = 0;
    for (std::size_t c = 0; c < groups.size(); ++c) {
        if (!allowed[c]) groups[c].clear();
        available += groups[c].size();
    }
    if (n > available)
        throw SourceError("holdout exhausted: requested " + std::to_string(n) + " examples, " +
                          std::to_string(available) + " available");

    Rng rng(derive_seed(seed, {kDistillStream}));
    for (auto& g : groups) std::shuffle(g.begin(), g.end(), rng);
    DistillationBatch batch;
    std::vector<std::size_t> cursor(groups.size(), 0);
    while (batch.source_indices.size() < n) {
        for (std::size_t c = 0; c < groups.size() && batch.source_indices.size() < n; ++c)
            if (cursor[c] < groups[c].size()) batch.source_indices.push_back(groups[c][cursor[c]++]);
    }
    batch.features = gather_features(*dataset_, batch.source_indices);
    return batch;
}

DistillationBatch DistillationSource::draw_directory(std::size_t n, std::uint64_t seed) const {
    if (!fs::is_directory(config_.directory))
        throw SourceError("distillation directory not found: " + config_.directory.string());
    const auto files = sorted_images(config_.directory);
    if (files.empty()) throw SourceError("distillation directory " + config_.directory.string() + " holds no images");
    if (files.size() < n)
        throw SourceError("distillation directory " + config_.directory.string() + " holds " +
                          std::to_string(files.size()) + " images, " + std::to_string(n) + " requested");
    std::vector<std::size_t> order(files.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, {kDistillStream}));
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(n);

    DistillationBatch batch;
    const std::size_t dims = dataset_->feature_size();
    std::vector<double> values;
    values.reserve(n * dims);
    for (std::size_t i : order) {
        Tensor image = read_netpbm(files[i]);
        if (image.size() != dims)
            throw SourceError("distillation image " + files[i].string() + " has shape " +
                              shape_to_string(image.shape()) + ", model input is " +
                              shape_to_string(dataset_->feature_shape));
        values.insert(values.end(), image.values().begin(), image.values().end());
        batch.source_indices.push_back(i);
    }
    Shape shape{n};
    shape.insert(shape.end(), dataset_->feature_shape.begin(), dataset_->feature_shape.end());
    batch.features = Tensor(std::move(shape), std::move(values));
    return batch;
}

DistillationBatch DistillationSource::draw_noise(std::size_t n, std::uint64_t seed) const {
    if (!(config_.noise_low < config_.noise_high))
        throw SourceError("noise source needs noise_low < noise_high");
    Rng rng(derive_seed(seed, {kDistillStream}));
    std::uniform_real_distribution<double> dist(config_.noise_low, config_.noise_high);
    Shape shape{n};
    shape.insert(shape.end(), dataset_->feature_shape.begin(), dataset_->feature_shape.end());
    DistillationBatch batch;
    batch.features = Tensor(std::move(shape));
    for (double& v : batch.features.values()) v = dist(rng);
    return batch;
}

double mean_label_entropy(const LabeledDataset& ds, const Partition& partition) {
    if (partition.clients.empty()) return 0.0;
    double total = 0.0;
    std::vector<double> counts(ds.class_count);
    for (const auto& client : partition.clients) {
        std::fill(counts.begin(), counts.end(), 0.0);
        for (std::size_t i : client) counts[ds.labels[i]] += 1.0;
        double h = 0.0;
        for (double c : counts)
            if (c > 0) {
                const double p = c / static_cast<double>(client.size());
                h -= p * std::log(p);
            }
        total += h;
    }
    return total / static_cast<double>(partition.clients.size());
}

} // namespace fedtsa
