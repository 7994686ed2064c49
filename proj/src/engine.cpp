#include "fedtsa/engine.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <numeric>
#include <thread>

#include "fedtsa/error.hpp"
#include "fedtsa/loss.hpp"
#include "fedtsa/model_zoo.hpp"
#include "fedtsa/rng.hpp"

namespace fedtsa {

namespace {

// Weighted mean that depends only on the multiset of (value, weight) pairs:
// terms are sorted, then accumulated as offsets from the smallest value, so
// identical inputs reproduce themselves exactly.
class CanonicalMean {
public:
    void reset() { terms_.clear(); }
    void add(double value, double weight) { terms_.emplace_back(value, weight); }
    double value() {
        std::sort(terms_.begin(), terms_.end());
        const double base = terms_.front().first;
        double acc = 0.0;
        for (const auto& [v, w] : terms_) acc += w * (v - base);
        return base + acc;
    }

private:
    std::vector<std::pair<double, double>> terms_;
};

template <class Fn>
auto with_context(const std::string& context, Fn&& fn) -> decltype(fn()) {
    try {
        return fn();
    } catch (const DimensionError& e) {
        throw DimensionError(context + ": " + e.what());
    } catch (const ValidationError& e) {
        throw ValidationError(context + ": " + e.what());
    } catch (const SourceError& e) {
        throw SourceError(context + ": " + e.what());
    } catch (const std::runtime_error& e) {
        throw std::runtime_error(context + ": " + e.what());
    }
}

void apply_sgd(ModelParams& params, const GradientSet& grads, double eta) {
    for (std::size_t i = 0; i < params.tensors.size(); ++i) {
        auto w = params.tensors[i].tensor.values();
        auto g = grads.tensors[i].values();
        for (std::size_t k = 0; k < w.size(); ++k) w[k] -= eta * g[k];
    }
}

std::size_t argmax_row(std::span<const double> row) {
    return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

// Runs fn(i) for i in [0, n) on up to `threads` workers; rethrows the
// lowest-index failure after all workers finish.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
    std::vector<std::exception_ptr> errors(n);
    auto run_one = [&](std::size_t i) {
        try {
            fn(i);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    };
    const std::size_t workers = std::min(threads, n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) run_one(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) run_one(i);
            });
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

template <class E>
E parse_enum(const std::string& s, std::initializer_list<std::pair<const char*, E>> table, const char* what) {
    std::string options;
    for (const auto& [name, value] : table) {
        if (s == name) return value;
        options += (options.empty() ? "" : "|") + std::string(name);
    }
    throw ValidationError(std::string("unknown ") + what + " '" + s + "' (" + options + ")");
}

} // namespace

std::string to_string(Algorithm a) {
    switch (a) {
        case Algorithm::fedtsa: return "fedtsa";
        case Algorithm::fedavg: return "fedavg";
        case Algorithm::fedprox: return "fedprox";
        case Algorithm::heterofl: return "heterofl";
    }
    return "unknown";
}
std::string to_string(LossMode m) {
    switch (m) {
        case LossMode::kl_only: return "kl_only";
        case LossMode::ce_only: return "ce_only";
        case LossMode::combined: return "combined";
    }
    return "unknown";
}
std::string to_string(Stage1Weighting w) { return w == Stage1Weighting::uniform ? "uniform" : "data_size"; }
std::string to_string(KlDirection d) {
    return d == KlDirection::consensus_target ? "consensus_target" : "model_target";
}
std::string to_string(KlReduction r) { return r == KlReduction::sum ? "sum" : "batchmean"; }

Algorithm algorithm_from_string(const std::string& s) {
    return parse_enum<Algorithm>(s,
                                 {{"fedtsa", Algorithm::fedtsa},
                                  {"fedavg", Algorithm::fedavg},
                                  {"fedprox", Algorithm::fedprox},
                                  {"heterofl", Algorithm::heterofl}},
                                 "algorithm");
}
LossMode loss_mode_from_string(const std::string& s) {
    return parse_enum<LossMode>(
        s, {{"kl_only", LossMode::kl_only}, {"ce_only", LossMode::ce_only}, {"combined", LossMode::combined}},
        "loss mode");
}
Stage1Weighting stage1_weighting_from_string(const std::string& s) {
    return parse_enum<Stage1Weighting>(
        s, {{"uniform", Stage1Weighting::uniform}, {"data_size", Stage1Weighting::data_size}}, "stage1 weighting");
}
KlDirection kl_direction_from_string(const std::string& s) {
    return parse_enum<KlDirection>(
        s, {{"consensus_target", KlDirection::consensus_target}, {"model_target", KlDirection::model_target}},
        "kl direction");
}
KlReduction kl_reduction_from_string(const std::string& s) {
    return parse_enum<KlReduction>(s, {{"sum", KlReduction::sum}, {"batchmean", KlReduction::batchmean}},
                                   "kl reduction");
}

void validate(const FedConfig& c) {
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw ValidationError(what);
    };
    require(c.clients >= 1, "clients must be >= 1");
    require(c.batch_size >= 1, "batch_size must be >= 1");
    require(c.learning_rate > 0.0 && std::isfinite(c.learning_rate), "learning_rate must be > 0");
    require(c.temperature > 0.0 && std::isfinite(c.temperature), "temperature must be > 0");
    require(c.global_epochs >= 1, "global_epochs must be >= 1");
    require(c.loss_alpha >= 0.0 && c.loss_alpha <= 1.0, "loss_alpha must lie in [0,1]");
    require(c.distill_count >= 1, "distillation count must be >= 1");
    require(c.distill_batch_size >= 1, "distillation batch size must be >= 1");
    require(c.fedprox_mu >= 0.0, "fedprox_mu must be >= 0");
    require(c.fedavg_rate > 0.0 && c.fedavg_rate <= 1.0, "fedavg_rate must lie in (0,1]");
    require(c.threads >= 1, "threads must be >= 1");
}

LocalResult local_update(const ModelSpec& spec, const ModelParams& start, const LabeledDataset& ds,
                         std::span<const std::size_t> indices, std::size_t epochs, std::size_t batch_size,
                         double learning_rate, double proximal_mu, std::uint64_t seed) {
    if (indices.empty()) throw ValidationError("local update needs at least one example");
    if (batch_size == 0) throw ValidationError("batch size must be >= 1");
    check_params(spec, start);
    LocalResult result{start, 0.0};
    if (epochs == 0 || learning_rate == 0.0) return result;

    Rng rng(seed);
    std::vector<std::size_t> order(indices.begin(), indices.end());
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t e = 0; e < epochs; ++e) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t b = 0; b < order.size(); b += batch_size) {
            const std::span<const std::size_t> idx(order.data() + b, std::min(batch_size, order.size() - b));
            const Tensor x = gather_features(ds, idx);
            const auto y = gather_labels(ds, idx);
            const auto trace = trace_forward(spec, result.params, x);
            const Tensor& out = trace.activations.back();
            const LogitMatrix logits(idx.size(), spec.class_count,
                                     std::vector<double>(out.values().begin(), out.values().end()));
            auto ce = cross_entropy(logits, y);
            GradientSet grads = backward(spec, result.params, trace, ce.grad);
            double loss = ce.loss;
            if (proximal_mu > 0.0) {
                double dist2 = 0.0;
                for (std::size_t t = 0; t < grads.tensors.size(); ++t) {
                    auto g = grads.tensors[t].values();
                    auto w = result.params.tensors[t].tensor.values();
                    auto w0 = start.tensors[t].tensor.values();
                    for (std::size_t k = 0; k < g.size(); ++k) {
                        const double d = w[k] - w0[k];
                        g[k] += proximal_mu * d;
                        dist2 += d * d;
                    }
                }
                loss += 0.5 * proximal_mu * dist2;
            }
            apply_sgd(result.params, grads, learning_rate);
            loss_sum += loss;
            ++batches;
        }
    }
    result.mean_loss = loss_sum / static_cast<double>(batches);
    return result;
}

ModelParams stage1_aggregate(std::span<const ModelParams> models, Stage1Weighting weighting,
                             std::span<const double> sizes) {
    if (models.empty()) throw ValidationError("stage1_aggregate needs at least one model");
    for (const auto& m : models) {
        if (m.tensors.size() != models.front().tensors.size())
            throw DimensionError("stage1_aggregate: models have different tensor counts");
        for (std::size_t t = 0; t < m.tensors.size(); ++t)
            if (m.tensors[t].tensor.shape() != models.front().tensors[t].tensor.shape())
                throw DimensionError("stage1_aggregate: tensor " + m.tensors[t].name + " shapes differ");
    }
    std::vector<double> weights(models.size(), 1.0 / static_cast<double>(models.size()));
    if (weighting == Stage1Weighting::data_size) {
        if (sizes.size() != models.size())
            throw ValidationError("stage1_aggregate: data_size weighting needs one size per model");
        double total = 0.0;
        for (double s : sizes) {
            if (!(s > 0.0)) throw ValidationError("stage1_aggregate: dataset sizes must be positive");
            total += s;
        }
        for (std::size_t i = 0; i < sizes.size(); ++i) weights[i] = sizes[i] / total;
    }
    ModelParams out = models.front();
    CanonicalMean mean;
    for (std::size_t t = 0; t < out.tensors.size(); ++t) {
        auto dst = out.tensors[t].tensor.values();
        for (std::size_t k = 0; k < dst.size(); ++k) {
            mean.reset();
            for (std::size_t m = 0; m < models.size(); ++m) mean.add(models[m].tensors[t].tensor[k], weights[m]);
            dst[k] = mean.value();
        }
    }
    return out;
}

std::vector<Tensor> split_batches(const Tensor& pool, std::size_t batch_size) {
    if (batch_size == 0) throw ValidationError("batch size must be >= 1");
    if (pool.rank() < 2) throw DimensionError("distillation pool must be [n, features...]");
    const std::size_t n = pool.dim(0);
    const std::size_t row = pool.size() / n;
    std::vector<Tensor> out;
    for (std::size_t b = 0; b < n; b += batch_size) {
        const std::size_t rows = std::min(batch_size, n - b);
        Shape shape = pool.shape();
        shape[0] = rows;
        out.emplace_back(shape, std::vector<double>(pool.values().begin() + b * row,
                                                    pool.values().begin() + (b + rows) * row));
    }
    return out;
}

Stage2Report stage2_dml(std::vector<ClusterState>& clusters, std::span<const Tensor> batches,
                        const FedConfig& config) {
    if (clusters.empty()) throw ValidationError("stage2_dml needs at least one cluster");
    for (const auto& c : clusters) {
        if (c.spec.input_shape != clusters.front().spec.input_shape)
            throw ValidationError("stage2_dml: cluster " + std::to_string(c.id) + " input shape differs");
        if (c.spec.class_count != clusters.front().spec.class_count)
            throw ValidationError("stage2_dml: cluster " + std::to_string(c.id) + " class count differs");
    }
    const std::size_t m = clusters.size();
    const double t = config.temperature;
    Stage2Report report;
    double kl_total = 0.0;
    CanonicalMean mean;
    for (std::size_t epoch = 0; epoch < config.global_epochs; ++epoch) {
        for (const Tensor& batch : batches) {
            // Snapshot: every model's logits before any model steps on this batch.
            std::vector<ForwardTrace> traces;
            std::vector<LogitMatrix> logits;
            for (const auto& c : clusters) {
                traces.push_back(trace_forward(c.spec, c.params, batch));
                const Tensor& out = traces.back().activations.back();
                logits.emplace_back(traces.back().batch, c.spec.class_count,
                                    std::vector<double>(out.values().begin(), out.values().end()));
            }
            const std::size_t rows = logits.front().rows();
            const std::size_t cols = logits.front().cols();
            auto consensus_for = [&](std::size_t self) {
                const bool exclude = config.leave_self_out && m > 1;
                const double w = 1.0 / static_cast<double>(exclude ? m - 1 : m);
                LogitMatrix avg(rows, cols);
                for (std::size_t k = 0; k < rows * cols; ++k) {
                    mean.reset();
                    for (std::size_t r = 0; r < m; ++r)
                        if (!(exclude && r == self)) mean.add(logits[r].values()[k], w);
                    avg.values()[k] = mean.value();
                }
                return avg;
            };
            const LogitMatrix shared = consensus_for(m);  // index m never matches: plain mean over all
            const double scale = (config.kl_reduction == KlReduction::batchmean ? 1.0 / static_cast<double>(rows) : 1.0) *
                                 (config.kl_temperature_squared ? t * t : 1.0);

            for (std::size_t r = 0; r < m; ++r) {
                const LogitMatrix consensus = config.leave_self_out && m > 1 ? consensus_for(r) : shared;
                const ProbMatrix target = softmax_with_temperature(consensus, t);
                LossResult kl = config.kl_direction == KlDirection::consensus_target
                                    ? kl_divergence(target, logits[r], t)
                                    : kl_divergence_from_model(logits[r], target, t);
                kl.loss *= scale;
                for (double& g : kl.grad.values()) g *= scale;
                kl_total += kl.loss;
                ++report.steps;

                LogitMatrix grad;
                if (config.loss_mode == LossMode::kl_only) {
                    grad = std::move(kl.grad);
                } else {
                    std::vector<std::size_t> pseudo(rows);
                    for (std::size_t i = 0; i < rows; ++i) pseudo[i] = argmax_row(consensus.row(i));
                    auto ce = cross_entropy(logits[r], pseudo);
                    grad = config.loss_mode == LossMode::ce_only ? std::move(ce.grad)
                                                                 : combined_grad(kl.grad, ce.grad, config.loss_alpha);
                }
                const GradientSet grads = backward(clusters[r].spec, clusters[r].params, traces[r], grad);
                apply_sgd(clusters[r].params, grads, config.learning_rate);
            }
        }
    }
    report.mean_kl = report.steps ? kl_total / static_cast<double>(report.steps) : 0.0;
    return report;
}

ModelParams heterofl_aggregate(const ModelSpec& global_spec, const ModelParams& global,
                               std::span<const ModelParams> client_params, std::span<const ModelSpec> client_specs) {
    check_params(global_spec, global);
    if (client_params.size() != client_specs.size())
        throw ValidationError("heterofl_aggregate: one spec per client model required");
    std::vector<OverlapMap> maps;
    for (std::size_t i = 0; i < client_specs.size(); ++i) {
        check_params(client_specs[i], client_params[i]);
        maps.push_back(overlap_map(global_spec, client_specs[i]));
    }
    ModelParams out = global;
    for (std::size_t t = 0; t < out.tensors.size(); ++t) {
        const std::size_t n = out.tensors[t].tensor.size();
        std::vector<std::vector<double>> covered(n);
        for (std::size_t i = 0; i < client_params.size(); ++i) {
            auto src = client_params[i].tensors[t].tensor.values();
            for_each_overlap(maps[i], t, [&](std::size_t l, std::size_t s) { covered[l].push_back(src[s]); });
        }
        auto dst = out.tensors[t].tensor.values();
        CanonicalMean mean;
        for (std::size_t k = 0; k < n; ++k) {
            if (covered[k].empty()) continue;
            mean.reset();
            const double w = 1.0 / static_cast<double>(covered[k].size());
            for (double v : covered[k]) mean.add(v, w);
            dst[k] = mean.value();
        }
    }
    return out;
}

double evaluate(const ModelSpec& spec, const ModelParams& params, const LabeledDataset& ds,
                std::span<const std::size_t> indices) {
    if (indices.empty()) throw ValidationError("evaluation set is empty");
    if (ds.feature_shape != spec.input_shape)
        throw DimensionError("evaluation data shape " + shape_to_string(ds.feature_shape) +
                             " does not match model input " + shape_to_string(spec.input_shape));
    constexpr std::size_t chunk = 256;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < indices.size(); b += chunk) {
        const auto idx = indices.subspan(b, std::min(chunk, indices.size() - b));
        const LogitMatrix logits = model_forward(spec, params, gather_features(ds, idx));
        for (std::size_t i = 0; i < idx.size(); ++i)
            if (argmax_row(logits.row(i)) == ds.labels[idx[i]]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(indices.size());
}

std::vector<ClusterState> initial_clusters(const ExperimentInputs& in) {
    const FedConfig& cfg = in.config;
    std::vector<ClusterState> clusters;
    if (cfg.algorithm == Algorithm::fedavg || cfg.algorithm == Algorithm::fedprox) {
        ClusterState c;
        c.id = 0;
        c.spec = build_pruned_spec(in.base_spec, cfg.fedavg_rate);
        c.params = init_params(c.spec, derive_seed(cfg.seed, {kInitStream, 0}));
        c.members.resize(in.partition.client_count());
        std::iota(c.members.begin(), c.members.end(), 0);
        clusters.push_back(std::move(c));
        return clusters;
    }
    const auto& a = in.assignment;
    if (a.pruning_rate.size() != a.cluster_count()) throw ValidationError("cluster assignment has no pruning rates");
    if (a.cluster_of.size() != in.partition.client_count())
        throw ValidationError("cluster assignment covers " + std::to_string(a.cluster_of.size()) + " clients, partition has " +
                              std::to_string(in.partition.client_count()));
    for (std::size_t c = 0; c < a.cluster_count(); ++c) {
        ClusterState s;
        s.id = c;
        s.spec = build_pruned_spec(in.base_spec, a.pruning_rate[c]);
        s.params = init_params(s.spec, derive_seed(cfg.seed, {kInitStream, c}));
        s.members = a.members[c];
        clusters.push_back(std::move(s));
    }
    return clusters;
}

ExperimentResult run_experiment(const ExperimentInputs& in, const RoundCallback& on_round) {
    const FedConfig& cfg = in.config;
    validate(cfg);
    if (!in.dataset) throw ValidationError("experiment has no dataset");
    const LabeledDataset& ds = *in.dataset;
    check_partition(in.partition, ds.size());
    if (in.profiles.size() != in.partition.client_count())
        throw ValidationError("one client profile per partition client required");
    if (in.test.empty()) throw ValidationError("experiment needs a non-empty test set");

    ExperimentResult result;
    result.clusters = initial_clusters(in);
    auto& clusters = result.clusters;
    const std::size_t k_clients = in.partition.client_count();

    // HeteroFL keeps one global model at the largest rate and trains slices of it.
    const bool heterofl = cfg.algorithm == Algorithm::heterofl;
    ModelSpec global_spec;
    ModelParams global;
    std::vector<OverlapMap> maps;
    if (heterofl) {
        double top = 0.0;
        for (const auto& c : clusters) top = std::max(top, c.spec.pruning_rate);
        global_spec = build_pruned_spec(in.base_spec, top);
        global = init_params(global_spec, derive_seed(cfg.seed, {kInitStream, 0}));
        for (auto& c : clusters) {
            maps.push_back(overlap_map(global_spec, c.spec));
            c.params = extract_submodel(global, c.spec, maps.back());
        }
    }

    std::vector<std::size_t> cluster_of(k_clients, 0);
    for (const auto& c : clusters)
        for (std::size_t k : c.members) cluster_of.at(k) = c.id;

    const double full_cost = static_cast<double>(parameter_count(build_pruned_spec(in.base_spec, 1.0)));
    std::vector<double> cost_ratio;
    for (const auto& c : clusters) cost_ratio.push_back(static_cast<double>(parameter_count(c.spec)) / full_cost);

    const bool dml = cfg.algorithm == Algorithm::fedtsa;
    std::vector<Tensor> distill_batches;
    auto draw_pool = [&](std::size_t round) {
        if (!in.distillation) throw SourceError("fedtsa needs a distillation source");
        const auto pool = in.distillation->draw(cfg.distill_count, derive_seed(cfg.seed, {kDistillStream, round}));
        distill_batches = split_batches(pool.features, cfg.distill_batch_size);
    };
    if (dml && cfg.rounds > 0) with_context("distillation", [&] { draw_pool(0); });

    for (std::size_t round = 0; round < cfg.rounds; ++round) {
        const auto wall_start = std::chrono::steady_clock::now();
        const std::string ctx = "round " + std::to_string(round);

        std::vector<LocalResult> local(k_clients);
        const double mu = cfg.algorithm == Algorithm::fedprox ? cfg.fedprox_mu : 0.0;
        parallel_for(k_clients, cfg.threads, [&](std::size_t k) {
            const ClusterState& c = clusters[cluster_of[k]];
            with_context(ctx + " cluster " + std::to_string(c.id) + " client " + std::to_string(k), [&] {
                local[k] = local_update(c.spec, c.params, ds, in.partition.clients[k], cfg.local_epochs,
                                        cfg.batch_size, cfg.learning_rate, mu,
                                        derive_seed(cfg.seed, {kLocalUpdateStream, k, round}));
            });
        });

        if (heterofl) {
            with_context(ctx + " heterofl aggregation", [&] {
                std::vector<ModelParams> params;
                std::vector<ModelSpec> specs;
                for (std::size_t k = 0; k < k_clients; ++k) {
                    params.push_back(std::move(local[k].params));
                    specs.push_back(clusters[cluster_of[k]].spec);
                }
                global = heterofl_aggregate(global_spec, global, params, specs);
                for (std::size_t c = 0; c < clusters.size(); ++c)
                    clusters[c].params = extract_submodel(global, clusters[c].spec, maps[c]);
            });
        } else {
            for (auto& c : clusters) {
                with_context(ctx + " cluster " + std::to_string(c.id) + " stage 1", [&] {
                    std::vector<ModelParams> params;
                    std::vector<double> sizes;
                    for (std::size_t k : c.members) {
                        params.push_back(std::move(local[k].params));
                        sizes.push_back(static_cast<double>(in.partition.clients[k].size()));
                    }
                    c.params = stage1_aggregate(params, cfg.stage1_weighting, sizes);
                });
            }
        }

        RoundMetrics metrics;
        metrics.round = round;
        if (dml) {
            with_context(ctx + " stage 2", [&] {
                if (cfg.resample_distillation && round > 0) draw_pool(round);
                metrics.stage2_kl_loss = stage2_dml(clusters, distill_batches, cfg).mean_kl;
            });
        }

        double loss_sum = 0.0;
        for (std::size_t k = 0; k < k_clients; ++k) {
            loss_sum += local[k].mean_loss;
            const double work = in.profiles[k].speed_factor * static_cast<double>(cfg.local_epochs) *
                                static_cast<double>(in.partition.clients[k].size()) * cost_ratio[cluster_of[k]];
            metrics.simulated_seconds = std::max(metrics.simulated_seconds, work);
        }
        metrics.mean_local_loss = loss_sum / static_cast<double>(k_clients);

        double total_examples = 0.0;
        for (const auto& c : clusters) {
            const double acc = with_context(ctx + " cluster " + std::to_string(c.id) + " evaluation",
                                            [&] { return evaluate(c.spec, c.params, ds, in.test); });
            metrics.cluster_accuracy.push_back(acc);
            double examples = 0.0;
            for (std::size_t k : c.members) examples += static_cast<double>(in.partition.clients[k].size());
            total_examples += examples;
            metrics.client_weighted_accuracy += acc * static_cast<double>(c.members.size());
            metrics.data_weighted_accuracy += acc * examples;
            metrics.cluster_mean_accuracy += acc;
        }
        metrics.client_weighted_accuracy /= static_cast<double>(k_clients);
        metrics.data_weighted_accuracy /= total_examples;
        metrics.cluster_mean_accuracy /= static_cast<double>(clusters.size());
        metrics.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
        if (on_round) on_round(metrics);
        result.rounds.push_back(std::move(metrics));
    }
    return result;
}

} // namespace fedtsa
