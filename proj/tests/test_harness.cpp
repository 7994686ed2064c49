#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "fedtsa/config.hpp"
#include "fedtsa/error.hpp"
#include "fedtsa/harness.hpp"

using namespace fedtsa;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* kSmallConfig = R"({
    "seed": 5,
    "dataset": {"blobs": {"classes": 3, "per_class": 50, "shape": [6], "center_range": 2.0}},
    "model": {"hidden": [16, 8]},
    "clients": {"count": 6, "speed_factors": [1, 1, 1, 2, 2, 2]},
    "training": {"rounds": 1, "local_epochs": 2, "batch_size": 16, "learning_rate": 0.05},
    "distillation": {"count": 30, "batch_size": 10}
})";

class TempDir {
public:
    TempDir() {
        static int counter = 0;
        path_ = fs::temp_directory_path() /
                ("fedtsa_harness_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
                 std::to_string(counter++) + "_" + std::to_string(std::hash<std::string>{}(
                     ::testing::UnitTest::GetInstance()->current_test_info()->name())));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
    std::ifstream in(p);
    std::vector<std::string> out;
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) out.push_back(line);
    return out;
}

fs::path write_config(const fs::path& dir, const json& patch = json::object()) {
    json j = json::parse(kSmallConfig);
    j.merge_patch(patch);
    const fs::path p = dir / "config_in.json";
    std::ofstream(p) << j.dump(2);
    return p;
}

int cli(const std::string& args) {
    const std::string cmd = std::string("\"") + FEDTSA_CLI_PATH + "\" " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

ExperimentConfig small_config(const fs::path& out) {
    auto c = parse_config_text(kSmallConfig);
    c.output.directory = out.string();
    return c;
}

} // namespace

TEST(Cli, SmokeRunWritesAllOutputs) {
    TempDir t;
    const auto cfg = write_config(t.path());
    const auto out = t.path() / "out";
    ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + out.string()), 0);
    const auto metrics = lines_of(out / "metrics.jsonl");
    ASSERT_EQ(metrics.size(), 1u);
    const json m = json::parse(metrics[0]);
    for (const char* key : {"round", "cluster_accuracy", "client_weighted_accuracy", "cluster_mean_accuracy",
                            "data_weighted_accuracy", "mean_local_loss", "stage2_kl_loss", "simulated_seconds"})
        EXPECT_TRUE(m.contains(key)) << key;
    EXPECT_FALSE(m.contains("wall_seconds"));
    EXPECT_EQ(lines_of(out / "summary.csv").size(), 2u);
    EXPECT_EQ(lines_of(out / "timing.jsonl").size(), 1u);
    EXPECT_TRUE(fs::exists(out / "config.json"));
    EXPECT_TRUE(fs::exists(out / "run.json"));
}

TEST(Cli, ExitCodesSeparateConfigFromRuntimeErrors) {
    TempDir t;
    const auto out = t.path() / "out";
    EXPECT_EQ(cli("run --config " + t.path().string() + "/missing.json"), 1);
    EXPECT_EQ(cli("run"), 1);
    EXPECT_EQ(cli("run --config " + write_config(t.path(), {{"training", {{"loss_alpha", 1.5}}}}).string()), 1);
    EXPECT_EQ(cli("run --config " + write_config(t.path()).string() + " --algo fedsgd"), 1);
    // A well-formed config pointing at a durations file that does not exist fails at run time.
    const auto bad = write_config(t.path(), {{"clients", {{"durations_file", (t.path() / "nope.csv").string()}}}});
    EXPECT_EQ(cli("run --config " + bad.string() + " --out " + out.string()), 2);
    EXPECT_FALSE(fs::exists(out / "metrics.jsonl"));
}

TEST(Cli, IdenticalRunsAreByteIdenticalAcrossThreadCounts) {
    TempDir t;
    const auto cfg = write_config(t.path(), {{"training", {{"rounds", 2}}}});
    const auto a = t.path() / "a", b = t.path() / "b", c = t.path() / "c";
    ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + a.string()), 0);
    ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + b.string()), 0);
    ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + c.string() + " --threads 4"), 0);
    EXPECT_EQ(slurp(a / "metrics.jsonl"), slurp(b / "metrics.jsonl"));
    EXPECT_EQ(slurp(a / "metrics.jsonl"), slurp(c / "metrics.jsonl"));
    EXPECT_EQ(slurp(a / "summary.csv"), slurp(c / "summary.csv"));
    EXPECT_EQ(slurp(a / "run.json"), slurp(c / "run.json"));
}

TEST(Cli, SeedOverrideChangesResults) {
    TempDir t;
    const auto cfg = write_config(t.path());
    const auto a = t.path() / "a", b = t.path() / "b";
    ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + a.string()), 0);
    ASSERT_EQ(cli("run --config " + cfg.string() + " --out " + b.string() + " --seed 6"), 0);
    EXPECT_NE(slurp(a / "metrics.jsonl"), slurp(b / "metrics.jsonl"));
    EXPECT_EQ(json::parse(slurp(b / "config.json"))["seed"], 6);
}

TEST(Cli, EchoedConfigReproducesMetrics) {
    TempDir t;
    const auto a = t.path() / "a", b = t.path() / "b";
    ASSERT_EQ(cli("run --config " + write_config(t.path()).string() + " --out " + a.string()), 0);
    ASSERT_EQ(cli("run --config " + (a / "config.json").string() + " --out " + b.string()), 0);
    EXPECT_EQ(slurp(a / "metrics.jsonl"), slurp(b / "metrics.jsonl"));
}

TEST(Cli, ProfileThenClusterFromDurations) {
    TempDir t;
    const auto durations = t.path() / "durations.csv";
    ASSERT_EQ(cli("profile --config " + write_config(t.path()).string() + " --out " + durations.string()), 0);
    const auto records = read_durations_file(durations);
    ASSERT_EQ(records.size(), 6u);
    EXPECT_NEAR(records[3].seconds / records[0].seconds, 2.0, 0.2);

    const auto cfg = write_config(t.path(), {{"clients", {{"durations_file", durations.string()}}}});
    const auto report_path = t.path() / "report.json";
    ASSERT_EQ(cli("cluster --config " + cfg.string() + " --out " + report_path.string()), 0);
    const json report = json::parse(slurp(report_path));
    EXPECT_EQ(report["clusters"].size(), 2u);
}

TEST(Harness, MetricsMatchResultAndRoundCount) {
    TempDir t;
    auto c = small_config(t.path() / "out");
    c.training.rounds = 3;
    const auto result = run(c);
    const auto lines = lines_of(t.path() / "out" / "metrics.jsonl");
    ASSERT_EQ(lines.size(), 3u);
    EXPECT_EQ(lines_of(t.path() / "out" / "summary.csv").size(), 2u);
    for (std::size_t i = 0; i < 3; ++i) {
        const json m = json::parse(lines[i]);
        EXPECT_EQ(m["round"], i);  // rounds are 0-based
        // Shortest round-trip formatting: parsed values are bit-identical.
        EXPECT_EQ(m["client_weighted_accuracy"].get<double>(), result.rounds[i].client_weighted_accuracy);
        EXPECT_EQ(m["mean_local_loss"].get<double>(), result.rounds[i].mean_local_loss);
        EXPECT_EQ(m["cluster_accuracy"].get<std::vector<double>>(), result.rounds[i].cluster_accuracy);
    }
}

TEST(Harness, FormatsControlWhichFilesAppear) {
    TempDir t;
    auto c = small_config(t.path() / "out");
    c.output.formats = {"csv"};
    run(c);
    EXPECT_FALSE(fs::exists(t.path() / "out" / "metrics.jsonl"));
    EXPECT_TRUE(fs::exists(t.path() / "out" / "summary.csv"));
}

TEST(Harness, ReportMatchesAssignment) {
    TempDir t;
    const auto prepared = prepare_run(small_config(t.path()));
    const json record = run_record(*prepared);
    const auto& clusters = record["clustering"]["clusters"];
    ASSERT_EQ(clusters.size(), prepared->assignment.cluster_count());
    for (std::size_t j = 0; j < clusters.size(); ++j) {
        EXPECT_EQ(clusters[j]["members"].get<std::vector<std::size_t>>(), prepared->assignment.members[j]);
        EXPECT_EQ(clusters[j]["pruning_rate"].get<double>(), prepared->assignment.pruning_rate[j]);
    }
    EXPECT_EQ(prepared->assignment.members[0], (std::vector<std::size_t>{0, 1, 2}));
    EXPECT_EQ(record["dataset"]["holdout"], 30);
}

TEST(Harness, ClientDataIgnoresAlgorithmAndSource) {
    TempDir t;
    auto a = small_config(t.path());
    auto b = a;
    b.training.algorithm = Algorithm::fedavg;
    b.distillation.source.kind = DistillationKind::noise;
    EXPECT_EQ(prepare_run(a)->partition.clients, prepare_run(b)->partition.clients);
}

TEST(Harness, RunCommandMapsErrors) {
    TempDir t;
    auto c = small_config(t.path() / "out");
    c.clients.durations_file = (t.path() / "missing.csv").string();
    std::ostringstream err;
    EXPECT_EQ(run_command(c, err), 2);
    EXPECT_FALSE(err.str().empty());
    auto bad = small_config(t.path() / "out");
    bad.training.temperature = -1;
    EXPECT_EQ(run_command(bad, err), 1);
}
