#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "fedtsa/config.hpp"
#include "fedtsa/error.hpp"

using namespace fedtsa;

namespace {

std::string error_of(const std::string& text) {
    try {
        parse_config_text(text, "test.json");
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

} // namespace

TEST(ConfigParse, EmptyObjectResolvesDefaults) {
    const auto c = parse_config_text("{}");
    EXPECT_EQ(c.training.temperature, 5.0);
    EXPECT_EQ(c.training.global_epochs, 1u);
    EXPECT_EQ(c.training.loss_mode, LossMode::kl_only);
    EXPECT_EQ(c.training.distill_count, 200u);
    EXPECT_EQ(c.training.batch_size, 100u);
    EXPECT_EQ(c.training.local_epochs, 100u);
    EXPECT_EQ(c.training.learning_rate, 0.03);
    EXPECT_EQ(c.training.rounds, 100u);
    EXPECT_EQ(c.clients.count, 20u);
    EXPECT_EQ(c.training.clients, 20u);
    EXPECT_EQ(c.training.kl_reduction, KlReduction::batchmean);
    EXPECT_FALSE(c.training.kl_temperature_squared);
    EXPECT_EQ(c.clustering.bandwidth_rule, BandwidthRule::isj);
    EXPECT_EQ(c.distillation.source.kind, DistillationKind::holdout);
}

TEST(ConfigParse, NestedValuesLand) {
    const auto c = parse_config_text(R"({
        "seed": 9,
        "clients": {"count": 4, "speed_factors": [1, 1, 2, 2]},
        "clustering": {"bandwidth": 0.3, "rate_ladder": [0.5, 1.0]},
        "training": {"algorithm": "heterofl", "loss_mode": "combined", "loss_alpha": 0.25},
        "distillation": {"source": "noise", "noise_low": -1, "noise_high": 1}
    })");
    EXPECT_EQ(c.seed, 9u);
    EXPECT_EQ(c.training.seed, 9u);
    EXPECT_EQ(c.training.clients, 4u);
    EXPECT_EQ(c.clients.speed_factors, (std::vector<double>{1, 1, 2, 2}));
    EXPECT_EQ(c.clustering.bandwidth, 0.3);
    EXPECT_EQ(c.training.algorithm, Algorithm::heterofl);
    EXPECT_EQ(c.training.loss_alpha, 0.25);
    EXPECT_EQ(c.distillation.source.kind, DistillationKind::noise);
    EXPECT_EQ(c.distillation.source.noise_low, -1.0);
}

TEST(ConfigParse, RejectsOutOfRangeWithPath) {
    const auto msg = error_of(R"({"training": {"loss_alpha": 1.5}})");
    EXPECT_NE(msg.find("training.loss_alpha"), std::string::npos) << msg;
    EXPECT_NE(error_of(R"({"training": {"temperature": 0}})").find("training.temperature"), std::string::npos);
    EXPECT_NE(error_of(R"({"clients": {"count": 3, "speed_factors": [1, 2]}})").find("clients.speed_factors"),
              std::string::npos);
    EXPECT_NE(error_of(R"({"dataset": {"test_fraction": 1.0}})").find("dataset.test_fraction"), std::string::npos);
}

TEST(ConfigParse, RejectsUnknownKeys) {
    const auto msg = error_of(R"({"training": {"lerning_rate": 0.1}})");
    EXPECT_NE(msg.find("training.lerning_rate"), std::string::npos) << msg;
    EXPECT_NE(error_of(R"({"trainig": {}})").find("trainig"), std::string::npos);
}

TEST(ConfigParse, RejectsWrongTypes) {
    EXPECT_NE(error_of(R"({"training": {"rounds": -1}})").find("training.rounds"), std::string::npos);
    EXPECT_NE(error_of(R"({"training": {"rounds": 2.5}})").find("training.rounds"), std::string::npos);
    EXPECT_NE(error_of(R"({"training": {"algorithm": "fedsgd"}})").find("training.algorithm"), std::string::npos);
    EXPECT_NE(error_of(R"({"model": {"hidden": "wide"}})").find("model.hidden"), std::string::npos);
    EXPECT_FALSE(error_of("[1, 2]").empty());
}

TEST(ConfigParse, SyntaxErrorNamesLine) {
    const auto msg = error_of("{\n  \"seed\": 1,\n  \"training\": {,}\n}");
    EXPECT_NE(msg.find("test.json:3"), std::string::npos) << msg;
}

TEST(ConfigEcho, DumpParsesBackIdentically) {
    const auto c = parse_config_text(R"({
        "seed": 3,
        "dataset": {"partition": "dirichlet", "dirichlet_alpha": 0.1, "blobs": {"shape": [1, 4, 4]}},
        "model": {"arch": "cnn", "conv_channels": [4, 8]},
        "clustering": {"bandwidth": 0.125},
        "training": {"learning_rate": 0.1, "kl_direction": "model_target", "threads": 3},
        "distillation": {"prompts": ["class0"], "resample": true}
    })");
    const std::string once = dump_config(c);
    const std::string twice = dump_config(parse_config_text(once));
    EXPECT_EQ(once, twice);
    EXPECT_EQ(dump_config(parse_config_text("{}")), dump_config(ExperimentConfig{}));
}

TEST(ConfigEcho, NumbersSurviveRoundTrip) {
    ExperimentConfig c;
    c.training.learning_rate = 0.1 + 0.2;
    c.clustering.bandwidth = 1.0 / 3.0;
    c.clients.count = 3;
    c.training.clients = 3;
    c.clients.speed_factors = {1e-300, 2.5e17, 0.7};
    const auto back = parse_config_text(dump_config(c));
    EXPECT_EQ(back.training.learning_rate, c.training.learning_rate);
    EXPECT_EQ(back.clustering.bandwidth, c.clustering.bandwidth);
    EXPECT_EQ(back.clients.speed_factors, c.clients.speed_factors);
}

TEST(ConfigFile, MissingFileIsConfigError) {
    EXPECT_THROW(parse_config_file("/nonexistent/fedtsa.json"), ConfigError);
}

TEST(ConfigFile, ShippedConfigsParse) {
    const std::filesystem::path dir = std::filesystem::path(FEDTSA_SOURCE_DIR) / "configs";
    std::size_t seen = 0;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.path().extension() != ".json") continue;
        EXPECT_NO_THROW(parse_config_file(entry.path())) << entry.path();
        ++seen;
    }
    EXPECT_GE(seen, 3u);
}
