#include "fedtsa/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "fedtsa/error.hpp"

namespace fedtsa {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& what) { throw ConfigError(path + ": " + what); }

// Wraps one JSON object and remembers which keys were consumed so leftovers
// can be reported as unknown.
class Reader {
public:
    Reader(const json& node, std::string path) : node_(node), path_(std::move(path)) {
        if (!node_.is_object()) fail(path_.empty() ? "<root>" : path_, "expected an object");
    }

    template <class T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = node_.find(key);
        if (it == node_.end()) return;
        convert(*it, field(key), out);
    }

    template <class E, class Parse>
    void get_enum(const char* key, E& out, Parse parse) {
        seen_.insert(key);
        auto it = node_.find(key);
        if (it == node_.end()) return;
        std::string s;
        convert(*it, field(key), s);
        try {
            out = parse(s);
        } catch (const std::exception& e) {
            fail(field(key), e.what());
        }
    }

    // Visits a nested object if present.
    template <class Fn>
    void child(const char* key, Fn&& fn) {
        seen_.insert(key);
        auto it = node_.find(key);
        if (it == node_.end()) return;
        Reader r(*it, field(key));
        fn(r);
        r.finish();
    }

    void finish() const {
        for (auto it = node_.begin(); it != node_.end(); ++it)
            if (!seen_.count(it.key())) fail(field(it.key()), "unknown key");
    }

private:
    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    static void convert(const json& j, const std::string& path, std::size_t& out) {
        static_assert(std::is_same_v<std::size_t, std::uint64_t>);
        if (!j.is_number_unsigned()) fail(path, "expected a non-negative integer");
        out = j.get<std::size_t>();
    }
    static void convert(const json& j, const std::string& path, double& out) {
        if (!j.is_number()) fail(path, "expected a number");
        out = j.get<double>();
    }
    static void convert(const json& j, const std::string& path, bool& out) {
        if (!j.is_boolean()) fail(path, "expected true or false");
        out = j.get<bool>();
    }
    static void convert(const json& j, const std::string& path, std::string& out) {
        if (!j.is_string()) fail(path, "expected a string");
        out = j.get<std::string>();
    }
    static void convert(const json& j, const std::string& path, std::optional<double>& out) {
        if (j.is_null()) {
            out.reset();
            return;
        }
        double v = 0.0;
        convert(j, path, v);
        out = v;
    }
    template <class T>
    static void convert(const json& j, const std::string& path, std::vector<T>& out) {
        if (!j.is_array()) fail(path, "expected an array");
        out.clear();
        for (std::size_t i = 0; i < j.size(); ++i) {
            T v{};
            convert(j[i], path + "[" + std::to_string(i) + "]", v);
            out.push_back(std::move(v));
        }
    }

    const json& node_;
    std::string path_;
    std::set<std::string> seen_;
};

PartitionMode partition_mode_from_string(const std::string& s) {
    if (s == "iid") return PartitionMode::iid;
    if (s == "dirichlet") return PartitionMode::dirichlet;
    throw ValidationError("unknown partition mode '" + s + "' (iid|dirichlet)");
}

std::size_t line_of(const std::string& text, std::size_t byte) {
    byte = std::min(byte, text.size());
    return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(byte), '\n'));
}

void require(bool ok, const char* path, const std::string& what) {
    if (!ok) fail(path, what);
}

bool positive(double v) { return v > 0.0 && std::isfinite(v); }

} // namespace

std::string to_string(PartitionMode mode) { return mode == PartitionMode::iid ? "iid" : "dirichlet"; }

void validate_config(const ExperimentConfig& c) {
    const auto& d = c.dataset;
    require(!d.source.empty(), "dataset.source", "must not be empty");
    require(d.test_fraction > 0.0 && d.test_fraction < 1.0, "dataset.test_fraction", "must lie in (0,1)");
    require(positive(d.dirichlet_alpha), "dataset.dirichlet_alpha", "must be > 0");
    require(d.blobs.classes >= 2, "dataset.blobs.classes", "must be >= 2");
    require(d.blobs.per_class >= 1, "dataset.blobs.per_class", "must be >= 1");
    require(!d.blobs.shape.empty() && shape_size(d.blobs.shape) > 0, "dataset.blobs.shape",
            "must be non-empty with positive extents");
    require(d.blobs.modes_per_class >= 1, "dataset.blobs.modes_per_class", "must be >= 1");
    require(d.blobs.center_range >= 0.0, "dataset.blobs.center_range", "must be >= 0");
    require(d.blobs.noise_sd >= 0.0, "dataset.blobs.noise_sd", "must be >= 0");

    const auto& m = c.model;
    require(m.arch == "mlp" || m.arch == "cnn", "model.arch", "must be mlp or cnn, got '" + m.arch + "'");
    for (std::size_t h : m.hidden) require(h >= 1, "model.hidden", "widths must be >= 1");
    for (std::size_t h : m.conv_channels) require(h >= 1, "model.conv_channels", "channel counts must be >= 1");
    if (m.arch == "cnn") require(!m.conv_channels.empty(), "model.conv_channels", "cnn needs at least one conv layer");
    require(m.dense_hidden >= 1, "model.dense_hidden", "must be >= 1");

    const auto& k = c.clients;
    require(k.count >= 1, "clients.count", "must be >= 1");
    require(k.speed_factors.empty() || k.speed_factors.size() == k.count, "clients.speed_factors",
            "needs one entry per client (" + std::to_string(k.count) + ")");
    for (double s : k.speed_factors) require(positive(s), "clients.speed_factors", "entries must be > 0");
    require(positive(k.proxy_workload), "clients.proxy_workload", "must be > 0");
    require(k.proxy_noise_sd >= 0.0, "clients.proxy_noise_sd", "must be >= 0");

    const auto& cl = c.clustering;
    if (cl.bandwidth) require(positive(*cl.bandwidth), "clustering.bandwidth", "must be > 0 or null");
    for (double r : cl.rate_ladder) require(r > 0.0 && r <= 1.0, "clustering.rate_ladder", "rates must lie in (0,1]");

    const auto& t = c.training;
    require(t.batch_size >= 1, "training.batch_size", "must be >= 1");
    require(positive(t.learning_rate), "training.learning_rate", "must be > 0");
    require(positive(t.temperature), "training.temperature", "must be > 0");
    require(t.global_epochs >= 1, "training.global_epochs", "must be >= 1");
    require(t.loss_alpha >= 0.0 && t.loss_alpha <= 1.0, "training.loss_alpha", "must lie in [0,1]");
    require(t.fedprox_mu >= 0.0, "training.fedprox_mu", "must be >= 0");
    require(t.fedavg_rate > 0.0 && t.fedavg_rate <= 1.0, "training.fedavg_rate", "must lie in (0,1]");
    require(t.threads >= 1, "training.threads", "must be >= 1");
    require(t.distill_count >= 1, "distillation.count", "must be >= 1");
    require(t.distill_batch_size >= 1, "distillation.batch_size", "must be >= 1");

    const auto& s = c.distillation.source;
    require(s.noise_low < s.noise_high, "distillation.noise_high", "must exceed noise_low");
    if (s.kind == DistillationKind::directory)
        require(!s.directory.empty(), "distillation.directory", "required for the directory source");

    require(!c.output.directory.empty(), "output.directory", "must not be empty");
    std::set<std::string> formats;
    for (const auto& f : c.output.formats) {
        require(f == "jsonl" || f == "csv", "output.formats", "unknown format '" + f + "' (jsonl|csv)");
        require(formats.insert(f).second, "output.formats", "duplicate format '" + f + "'");
    }

    try {
        validate(t);
    } catch (const ValidationError& e) {
        fail("training", e.what());
    }
}

ExperimentConfig parse_config_text(const std::string& text, const std::string& origin) {
    json root;
    try {
        root = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(origin + ":" + std::to_string(line_of(text, e.byte)) + ": " + e.what());
    }

    ExperimentConfig c;
    Reader r(root, "");
    r.get("description", c.description);
    r.get("seed", c.seed);
    r.child("dataset", [&](Reader& d) {
        d.get("source", c.dataset.source);
        d.get("test_fraction", c.dataset.test_fraction);
        d.get_enum("partition", c.dataset.partition, partition_mode_from_string);
        d.get("dirichlet_alpha", c.dataset.dirichlet_alpha);
        d.child("blobs", [&](Reader& b) {
            b.get("classes", c.dataset.blobs.classes);
            b.get("per_class", c.dataset.blobs.per_class);
            b.get("shape", c.dataset.blobs.shape);
            b.get("modes_per_class", c.dataset.blobs.modes_per_class);
            b.get("center_range", c.dataset.blobs.center_range);
            b.get("noise_sd", c.dataset.blobs.noise_sd);
        });
    });
    r.child("model", [&](Reader& m) {
        m.get("arch", c.model.arch);
        m.get("hidden", c.model.hidden);
        m.get("conv_channels", c.model.conv_channels);
        m.get("dense_hidden", c.model.dense_hidden);
    });
    r.child("clients", [&](Reader& k) {
        k.get("count", c.clients.count);
        k.get("speed_factors", c.clients.speed_factors);
        k.get("durations_file", c.clients.durations_file);
        k.get("proxy_workload", c.clients.proxy_workload);
        k.get("proxy_noise_sd", c.clients.proxy_noise_sd);
    });
    r.child("clustering", [&](Reader& k) {
        k.get("bandwidth", c.clustering.bandwidth);
        k.get_enum("bandwidth_rule", c.clustering.bandwidth_rule, bandwidth_rule_from_string);
        k.get("rate_ladder", c.clustering.rate_ladder);
    });
    auto& t = c.training;
    r.child("training", [&](Reader& k) {
        k.get_enum("algorithm", t.algorithm, algorithm_from_string);
        k.get("rounds", t.rounds);
        k.get("local_epochs", t.local_epochs);
        k.get("batch_size", t.batch_size);
        k.get("learning_rate", t.learning_rate);
        k.get("temperature", t.temperature);
        k.get("global_epochs", t.global_epochs);
        k.get_enum("loss_mode", t.loss_mode, loss_mode_from_string);
        k.get("loss_alpha", t.loss_alpha);
        k.get_enum("stage1_weighting", t.stage1_weighting, stage1_weighting_from_string);
        k.get_enum("kl_direction", t.kl_direction, kl_direction_from_string);
        k.get_enum("kl_reduction", t.kl_reduction, kl_reduction_from_string);
        k.get("kl_temperature_squared", t.kl_temperature_squared);
        k.get("leave_self_out", t.leave_self_out);
        k.get("fedprox_mu", t.fedprox_mu);
        k.get("fedavg_rate", t.fedavg_rate);
        k.get("threads", t.threads);
    });
    auto& s = c.distillation.source;
    r.child("distillation", [&](Reader& k) {
        k.get_enum("source", s.kind, distillation_kind_from_string);
        k.get("count", t.distill_count);
        k.get("batch_size", t.distill_batch_size);
        k.get("resample", t.resample_distillation);
        k.get("prompts", s.prompts);
        std::string dir;
        k.get("directory", dir);
        s.directory = dir;
        k.get("noise_low", s.noise_low);
        k.get("noise_high", s.noise_high);
    });
    r.child("output", [&](Reader& k) {
        k.get("directory", c.output.directory);
        k.get("formats", c.output.formats);
    });
    r.finish();

    t.clients = c.clients.count;
    t.seed = c.seed;
    validate_config(c);
    return c;
}

ExperimentConfig parse_config_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError(path.string() + ": cannot open config file");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str(), path.string());
}

json config_to_json(const ExperimentConfig& c) {
    const auto& t = c.training;
    const auto& s = c.distillation.source;
    json j;
    j["description"] = c.description;
    j["seed"] = c.seed;
    j["dataset"] = {
        {"source", c.dataset.source},
        {"test_fraction", c.dataset.test_fraction},
        {"partition", to_string(c.dataset.partition)},
        {"dirichlet_alpha", c.dataset.dirichlet_alpha},
        {"blobs",
         {{"classes", c.dataset.blobs.classes},
          {"per_class", c.dataset.blobs.per_class},
          {"shape", c.dataset.blobs.shape},
          {"modes_per_class", c.dataset.blobs.modes_per_class},
          {"center_range", c.dataset.blobs.center_range},
          {"noise_sd", c.dataset.blobs.noise_sd}}},
    };
    j["model"] = {{"arch", c.model.arch},
                  {"hidden", c.model.hidden},
                  {"conv_channels", c.model.conv_channels},
                  {"dense_hidden", c.model.dense_hidden}};
    j["clients"] = {{"count", c.clients.count},
                    {"speed_factors", c.clients.speed_factors},
                    {"durations_file", c.clients.durations_file},
                    {"proxy_workload", c.clients.proxy_workload},
                    {"proxy_noise_sd", c.clients.proxy_noise_sd}};
    j["clustering"] = {{"bandwidth", c.clustering.bandwidth ? json(*c.clustering.bandwidth) : json(nullptr)},
                       {"bandwidth_rule", to_string(c.clustering.bandwidth_rule)},
                       {"rate_ladder", c.clustering.rate_ladder}};
    j["training"] = {{"algorithm", to_string(t.algorithm)},
                     {"rounds", t.rounds},
                     {"local_epochs", t.local_epochs},
                     {"batch_size", t.batch_size},
                     {"learning_rate", t.learning_rate},
                     {"temperature", t.temperature},
                     {"global_epochs", t.global_epochs},
                     {"loss_mode", to_string(t.loss_mode)},
                     {"loss_alpha", t.loss_alpha},
                     {"stage1_weighting", to_string(t.stage1_weighting)},
                     {"kl_direction", to_string(t.kl_direction)},
                     {"kl_reduction", to_string(t.kl_reduction)},
                     {"kl_temperature_squared", t.kl_temperature_squared},
                     {"leave_self_out", t.leave_self_out},
                     {"fedprox_mu", t.fedprox_mu},
                     {"fedavg_rate", t.fedavg_rate},
                     {"threads", t.threads}};
    j["distillation"] = {{"source", to_string(s.kind)},
                         {"count", t.distill_count},
                         {"batch_size", t.distill_batch_size},
                         {"resample", t.resample_distillation},
                         {"prompts", s.prompts},
                         {"directory", s.directory.string()},
                         {"noise_low", s.noise_low},
                         {"noise_high", s.noise_high}};
    j["output"] = {{"directory", c.output.directory}, {"formats", c.output.formats}};
    return j;
}

std::string dump_config(const ExperimentConfig& config) { return config_to_json(config).dump(2) + "\n"; }

} // namespace fedtsa
