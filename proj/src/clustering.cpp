#include "fedtsa/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "fedtsa/error.hpp"
#include "fedtsa/rng.hpp"

namespace fedtsa {

namespace {

double quantile(std::vector<double> sorted, double q) {
    // Linear interpolation between order statistics.
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

void check_samples(std::span<const double> samples) {
    if (samples.empty()) throw ValidationError("density estimation needs at least one duration");
    for (double x : samples)
        if (!std::isfinite(x)) throw ValidationError("durations must be finite");
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

} // namespace

std::vector<ClientProfile> measure_durations(std::vector<ClientProfile> profiles, double workload_units,
                                             double noise_sd, std::uint64_t seed) {
    if (!(workload_units > 0.0)) throw ValidationError("proxy workload_units must be > 0");
    if (!(noise_sd >= 0.0)) throw ValidationError("proxy noise_sd must be >= 0");
    for (auto& p : profiles) {
        if (!(p.speed_factor > 0.0))
            throw ValidationError("client " + std::to_string(p.client_id) + " has non-positive speed factor");
        double eps = 0.0;
        if (noise_sd > 0.0) {
            Rng rng(derive_seed(seed, {kProfileStream, p.client_id}));
            std::normal_distribution<double> normal(0.0, noise_sd);
            eps = std::clamp(normal(rng), -3.0 * noise_sd, 3.0 * noise_sd);
        }
        const double duration = p.speed_factor * workload_units * (1.0 + eps);
        if (!(duration > 0.0))
            throw ValidationError("client " + std::to_string(p.client_id) +
                                  " got a non-positive proxy duration; reduce proxy noise_sd");
        p.measured_duration = duration;
    }
    return profiles;
}

std::vector<DurationRecord> read_durations_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestionError("cannot open durations file " + path.string());
    std::vector<DurationRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto comma = line.find(',');
        auto bad = [&](const std::string& why) {
            return IngestionError(path.string() + ":" + std::to_string(line_no) + ": " + why);
        };
        if (comma == std::string::npos) throw bad("expected 'client_id,duration_seconds'");
        DurationRecord r;
        try {
            std::size_t used = 0;
            const std::string id = trim(line.substr(0, comma));
            const long long parsed_id = std::stoll(id, &used);
            if (used != id.size() || parsed_id < 0) throw bad("malformed client id '" + id + "'");
            r.client_id = static_cast<std::size_t>(parsed_id);
            const std::string secs = trim(line.substr(comma + 1));
            r.seconds = std::stod(secs, &used);
            if (used != secs.size()) throw bad("malformed duration '" + secs + "'");
        } catch (const std::logic_error&) {
            throw bad("malformed record '" + line + "'");
        }
        if (!(r.seconds > 0.0) || !std::isfinite(r.seconds)) throw bad("duration must be positive");
        records.push_back(r);
    }
    if (records.empty()) throw IngestionError("durations file " + path.string() + " holds no records");
    return records;
}

void write_durations_file(const std::filesystem::path& path, std::span<const ClientProfile> profiles) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IngestionError("cannot open durations file for writing: " + path.string());
    out.precision(17);
    for (const auto& p : profiles) {
        if (!p.measured_duration) throw ValidationError("client " + std::to_string(p.client_id) + " is not profiled");
        out << p.client_id << ',' << *p.measured_duration << '\n';
    }
    if (!out) throw IngestionError("failed writing durations file " + path.string());
}

std::vector<ClientProfile> apply_durations(std::vector<ClientProfile> profiles,
                                           std::span<const DurationRecord> records) {
    for (auto& p : profiles) {
        const auto it = std::find_if(records.begin(), records.end(),
                                     [&](const DurationRecord& r) { return r.client_id == p.client_id; });
        if (it == records.end())
            throw IngestionError("durations file has no record for client " + std::to_string(p.client_id));
        p.measured_duration = it->seconds;
    }
    return profiles;
}

std::vector<double> durations_of(std::span<const ClientProfile> profiles) {
    std::vector<double> out;
    for (const auto& p : profiles) {
        if (!p.measured_duration) throw ValidationError("client " + std::to_string(p.client_id) + " is not profiled");
        out.push_back(*p.measured_duration);
    }
    return out;
}

double gaussian_kernel(double u) {
    return std::exp(-0.5 * u * u) / std::sqrt(2.0 * std::numbers::pi);
}

std::string to_string(BandwidthRule rule) {
    return rule == BandwidthRule::isj ? "isj" : "silverman";
}

BandwidthRule bandwidth_rule_from_string(const std::string& s) {
    if (s == "isj") return BandwidthRule::isj;
    if (s == "silverman") return BandwidthRule::silverman;
    throw ValidationError("unknown bandwidth rule '" + s + "' (isj|silverman)");
}

double silverman_bandwidth(std::span<const double> samples) {
    check_samples(samples);
    const double n = static_cast<double>(samples.size());
    const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) / n;
    double sd = 0.0;
    if (samples.size() > 1) {
        double ss = 0.0;
        for (double x : samples) ss += (x - mean) * (x - mean);
        sd = std::sqrt(ss / (n - 1.0));
    }
    std::vector<double> sorted(samples.begin(), samples.end());
    std::sort(sorted.begin(), sorted.end());
    const double iqr_scale = (quantile(sorted, 0.75) - quantile(sorted, 0.25)) / 1.34;
    double scale = 0.0;
    if (sd > 0.0 && iqr_scale > 0.0) {
        scale = std::min(sd, iqr_scale);
    } else {
        scale = std::max(sd, iqr_scale);
    }
    if (!(scale > 0.0)) scale = 1e-3 * std::max(std::abs(mean), 1e-3);
    return 0.9 * scale * std::pow(n, -0.2);
}

std::optional<double> isj_bandwidth(std::span<const double> samples) {
    check_samples(samples);
    constexpr std::size_t grid = 1024;
    const auto [mn, mx] = std::minmax_element(samples.begin(), samples.end());
    const double range = *mx - *mn;
    if (!(range > 0.0)) return std::nullopt;
    const double lo = *mn - range / 10.0;
    const double span = range * 1.2;
    const double n = static_cast<double>(samples.size());

    std::vector<double> hist(grid, 0.0);
    for (double x : samples) {
        auto bin = static_cast<std::size_t>((x - lo) / span * grid);
        hist[std::min(bin, grid - 1)] += 1.0 / n;
    }
    // DCT-II coefficients a_k = 2 sum_j h_j cos(pi k (2j + 1) / 2G), k >= 1.
    std::vector<double> k2(grid - 1), a2(grid - 1);
    for (std::size_t k = 1; k < grid; ++k) {
        double a = 0.0;
        for (std::size_t j = 0; j < grid; ++j)
            if (hist[j] != 0.0)
                a += hist[j] * std::cos(std::numbers::pi * static_cast<double>(k * (2 * j + 1)) / (2.0 * grid));
        a *= 2.0;
        k2[k - 1] = static_cast<double>(k * k);
        a2[k - 1] = (a / 2.0) * (a / 2.0);
    }
    const double pi2 = std::numbers::pi * std::numbers::pi;
    auto functional = [&](int s, double t) {
        double acc = 0.0;
        for (std::size_t i = 0; i < k2.size(); ++i)
            acc += std::pow(k2[i], s) * a2[i] * std::exp(-k2[i] * pi2 * t);
        return 2.0 * std::pow(std::numbers::pi, 2 * s) * acc;
    };
    // t - xi * gamma^[l](t), l = 7
    auto fixed_point = [&](double t) {
        constexpr int l = 7;
        double f = functional(l, t);
        for (int s = l - 1; s >= 2; --s) {
            double k0 = 1.0;
            for (int odd = 1; odd < 2 * s; odd += 2) k0 *= odd;
            k0 /= std::sqrt(2.0 * std::numbers::pi);
            const double c = (1.0 + std::pow(0.5, s + 0.5)) / 3.0;
            const double time = std::pow(2.0 * c * k0 / n / f, 2.0 / (3.0 + 2.0 * s));
            f = functional(s, time);
        }
        return t - std::pow(2.0 * n * std::sqrt(std::numbers::pi) * f, -0.4);
    };

    constexpr int steps = 2000;
    constexpr double t_min = 1e-8, t_max = 0.1;
    double prev_t = t_min;
    double prev_v = fixed_point(prev_t);
    for (int i = 1; i <= steps; ++i) {
        const double t = t_min + (t_max - t_min) * i / steps;
        const double v = fixed_point(t);
        if (std::isfinite(prev_v) && std::isfinite(v) && (prev_v < 0.0) != (v < 0.0)) {
            double a = prev_t, b = t, fa = prev_v;
            for (int it = 0; it < 200 && b - a > 1e-16; ++it) {
                const double m = 0.5 * (a + b);
                const double fm = fixed_point(m);
                if (!std::isfinite(fm)) break;
                if ((fm < 0.0) == (fa < 0.0)) {
                    a = m;
                    fa = fm;
                } else {
                    b = m;
                }
            }
            const double h = std::sqrt(0.5 * (a + b)) * span;
            if (std::isfinite(h) && h > 0.0) return h;
            return std::nullopt;
        }
        prev_t = t;
        prev_v = v;
    }
    return std::nullopt;
}

double select_bandwidth(std::span<const double> samples, BandwidthRule rule) {
    if (rule == BandwidthRule::isj) {
        if (auto h = isj_bandwidth(samples)) return *h;
    }
    return silverman_bandwidth(samples);
}

double kde_at(std::span<const double> samples, double bandwidth, double x) {
    double acc = 0.0;
    for (double xi : samples) acc += gaussian_kernel((x - xi) / bandwidth);
    return acc / (static_cast<double>(samples.size()) * bandwidth);
}

DensityEstimate kde_density(std::span<const double> durations, std::optional<double> bandwidth,
                            BandwidthRule rule) {
    check_samples(durations);
    for (double x : durations)
        if (!(x > 0.0)) throw ValidationError("durations must be positive");
    DensityEstimate est;
    est.sample_count = durations.size();
    if (bandwidth) {
        if (!(*bandwidth > 0.0) || !std::isfinite(*bandwidth))
            throw ValidationError("bandwidth must be a positive finite number");
        est.bandwidth = *bandwidth;
    } else {
        est.bandwidth = select_bandwidth(durations, rule);
    }
    const auto [mn, mx] = std::minmax_element(durations.begin(), durations.end());
    const double lo = *mn - 3.0 * est.bandwidth;
    const double hi = *mx + 3.0 * est.bandwidth;
    est.grid.resize(kDensityGridPoints);
    est.density.resize(kDensityGridPoints);
    for (std::size_t i = 0; i < kDensityGridPoints; ++i) {
        est.grid[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(kDensityGridPoints - 1);
        est.density[i] = kde_at(durations, est.bandwidth, est.grid[i]);
    }
    return est;
}

double trapezoid_integral(const DensityEstimate& estimate) {
    double acc = 0.0;
    for (std::size_t i = 1; i < estimate.grid.size(); ++i)
        acc += 0.5 * (estimate.density[i] + estimate.density[i - 1]) * (estimate.grid[i] - estimate.grid[i - 1]);
    return acc;
}

std::vector<double> density_minima(const DensityEstimate& estimate) {
    std::vector<double> minima;
    const auto& f = estimate.density;
    const auto& x = estimate.grid;
    int prev_sign = 0;
    std::size_t run_start = 0;  // first grid point after the last non-flat step
    for (std::size_t i = 0; i + 1 < f.size(); ++i) {
        const double d = f[i + 1] - f[i];
        const int sign = d > 0.0 ? 1 : (d < 0.0 ? -1 : 0);
        if (sign == 0) continue;
        if (prev_sign < 0 && sign > 0) minima.push_back(0.5 * (x[run_start] + x[i]));
        prev_sign = sign;
        run_start = i + 1;
    }
    return minima;
}

ClusterAssignment cluster_by_density(const DensityEstimate& estimate, std::span<const double> durations) {
    check_samples(durations);
    const auto minima = density_minima(estimate);
    // Raw interval index: number of boundaries strictly below the duration.
    std::vector<std::size_t> raw(durations.size());
    std::vector<std::size_t> counts(minima.size() + 1, 0);
    for (std::size_t i = 0; i < durations.size(); ++i) {
        raw[i] = static_cast<std::size_t>(std::lower_bound(minima.begin(), minima.end(), durations[i]) - minima.begin());
        ++counts[raw[i]];
    }
    ClusterAssignment out;
    std::vector<std::size_t> compact(counts.size(), 0);
    std::size_t next = 0;
    for (std::size_t j = 0; j < counts.size(); ++j) {
        if (counts[j] == 0) continue;
        if (next > 0) {
            // Keep the lowest boundary above the previous non-empty interval.
            std::size_t prev = j;
            while (counts[--prev] == 0) {}
            out.boundaries.push_back(minima[prev]);
        }
        compact[j] = next++;
    }
    out.members.resize(next);
    out.mean_duration.assign(next, 0.0);
    out.cluster_of.resize(durations.size());
    for (std::size_t i = 0; i < durations.size(); ++i) {
        const std::size_t c = compact[raw[i]];
        out.cluster_of[i] = c;
        out.members[c].push_back(i);
        out.mean_duration[c] += durations[i];
    }
    for (std::size_t c = 0; c < next; ++c) out.mean_duration[c] /= static_cast<double>(out.members[c].size());
    out.fastest_mean = out.mean_duration.front();
    return out;
}

ClusterAssignment assign_pruning_rates(ClusterAssignment assignment, std::span<const double> ladder) {
    if (assignment.mean_duration.empty()) throw ValidationError("no clusters to assign rates to");
    for (double t : assignment.mean_duration)
        if (!(t > 0.0)) throw ValidationError("cluster mean duration must be positive");
    for (double r : ladder)
        if (!(r > 0.0 && r <= 1.0)) throw ValidationError("rate ladder values must lie in (0,1]");
    const auto fastest = std::min_element(assignment.mean_duration.begin(), assignment.mean_duration.end());
    assignment.fastest_mean = *fastest;
    const auto fastest_index = static_cast<std::size_t>(fastest - assignment.mean_duration.begin());
    assignment.pruning_rate.assign(assignment.cluster_count(), 1.0);
    for (std::size_t c = 0; c < assignment.cluster_count(); ++c) {
        if (c == fastest_index) continue;
        double rate = assignment.fastest_mean / assignment.mean_duration[c];
        if (!ladder.empty()) {
            double best = ladder.front();
            for (double r : ladder) {
                const double d = std::abs(r - rate), db = std::abs(best - rate);
                if (d < db || (d == db && r > best)) best = r;
            }
            rate = best;
        }
        assignment.pruning_rate[c] = rate;
    }
    return assignment;
}

nlohmann::json cluster_report(const ClusterAssignment& assignment, const DensityEstimate& estimate,
                              std::span<const ClientProfile> profiles) {
    using nlohmann::json;
    json clusters = json::array();
    for (std::size_t c = 0; c < assignment.cluster_count(); ++c) {
        std::vector<std::size_t> ids;
        for (std::size_t i : assignment.members[c]) ids.push_back(profiles[i].client_id);
        clusters.push_back({{"id", c},
                            {"mean_duration", assignment.mean_duration[c]},
                            {"pruning_rate", assignment.pruning_rate.empty() ? 1.0 : assignment.pruning_rate[c]},
                            {"members", ids}});
    }
    json durations = json::array();
    for (const auto& p : profiles)
        durations.push_back({{"client_id", p.client_id}, {"seconds", p.measured_duration.value_or(0.0)}});
    return json{{"bandwidth", estimate.bandwidth},
                {"boundaries", assignment.boundaries},
                {"fastest_mean", assignment.fastest_mean},
                {"clusters", std::move(clusters)},
                {"durations", std::move(durations)}};
}

} // namespace fedtsa
