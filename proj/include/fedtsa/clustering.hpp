#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace fedtsa {

struct ClientProfile {
    std::size_t client_id = 0;
    double speed_factor = 1.0;  // simulated seconds per workload unit
    std::optional<double> measured_duration;
};

// duration = speed_factor * workload_units * (1 + eps), eps ~ Normal(0, noise_sd)
// clamped to +-3 noise_sd, drawn from a per-client stream of `seed`.
std::vector<ClientProfile> measure_durations(std::vector<ClientProfile> profiles, double workload_units,
                                             double noise_sd, std::uint64_t seed);

struct DurationRecord {
    std::size_t client_id = 0;
    double seconds = 0.0;
};

// "client_id,duration_seconds" per line; blank lines and '#' comments skipped.
std::vector<DurationRecord> read_durations_file(const std::filesystem::path& path);
void write_durations_file(const std::filesystem::path& path, std::span<const ClientProfile> profiles);

// Copies durations into the matching profiles; every profile must be covered.
std::vector<ClientProfile> apply_durations(std::vector<ClientProfile> profiles,
                                           std::span<const DurationRecord> records);

std::vector<double> durations_of(std::span<const ClientProfile> profiles);

double gaussian_kernel(double u);

enum class BandwidthRule { isj, silverman };

std::string to_string(BandwidthRule rule);
BandwidthRule bandwidth_rule_from_string(const std::string& s);

// 0.9 * min(sd, IQR / 1.34) * n^(-1/5); falls back to whichever spread is
// positive, then to a small positive floor for constant samples.
double silverman_bandwidth(std::span<const double> samples);

// Improved Sheather-Jones plug-in (Botev et al. fixed point on a binned DCT).
// Empty when no fixed point exists, typically for tiny unimodal samples.
std::optional<double> isj_bandwidth(std::span<const double> samples);

// ISJ when it has a solution, Silverman otherwise.
double select_bandwidth(std::span<const double> samples, BandwidthRule rule = BandwidthRule::isj);

// (1 / n h) sum_i K((x - x_i) / h)
double kde_at(std::span<const double> samples, double bandwidth, double x);

inline constexpr std::size_t kDensityGridPoints = 512;

struct DensityEstimate {
    double bandwidth = 0.0;
    std::vector<double> grid;     // ascending, spans [min - 3h, max + 3h]
    std::vector<double> density;  // f_hat at grid points
    std::size_t sample_count = 0;
};

DensityEstimate kde_density(std::span<const double> durations, std::optional<double> bandwidth = std::nullopt,
                            BandwidthRule rule = BandwidthRule::isj);

double trapezoid_integral(const DensityEstimate& estimate);

// Interior local minima of the density (strict descent then ascent; flat runs
// between them report their midpoint), ascending.
std::vector<double> density_minima(const DensityEstimate& estimate);

struct ClusterAssignment {
    std::vector<std::size_t> cluster_of;     // per input duration
    std::vector<double> boundaries;          // ascending; cluster j covers (b_{j-1}, b_j]
    std::vector<double> mean_duration;       // per cluster, strictly increasing
    std::vector<std::vector<std::size_t>> members;
    std::vector<double> pruning_rate;        // filled by assign_pruning_rates
    double fastest_mean = 0.0;

    std::size_t cluster_count() const { return mean_duration.size(); }
};

ClusterAssignment cluster_by_density(const DensityEstimate& estimate, std::span<const double> durations);

// Fastest cluster gets 1.0, cluster i gets t_fastest / t_i; with a ladder,
// every other rate snaps to the nearest ladder value (ties to the larger).
ClusterAssignment assign_pruning_rates(ClusterAssignment assignment,
                                       std::span<const double> ladder = {});

nlohmann::json cluster_report(const ClusterAssignment& assignment, const DensityEstimate& estimate,
                              std::span<const ClientProfile> profiles);

} // namespace fedtsa
