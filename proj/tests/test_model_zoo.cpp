#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "fedtsa/error.hpp"
#include "fedtsa/model_zoo.hpp"

using namespace fedtsa;

namespace {

std::vector<std::size_t> dense_widths(const ModelSpec& spec) {
    std::vector<std::size_t> out;
    for (const auto& l : spec.layers)
        if (const auto* d = std::get_if<Dense>(&l)) out.push_back(d->units);
    return out;
}

ModelParams random_params(const ModelSpec& spec, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n;
    ModelParams p = zero_params(spec);
    for (auto& t : p.tensors)
        for (double& v : t.tensor.values()) v = n(rng);
    return p;
}

} // namespace

TEST(PrunedSpec, FullRateIsIdentity) {
    const ModelSpec base = mlp_base({16}, {128, 64}, 4);
    EXPECT_EQ(build_pruned_spec(base, 1.0), base);
}

TEST(PrunedSpec, HalvesHiddenWidths) {
    const ModelSpec spec = build_pruned_spec(mlp_base({16}, {64, 32}, 4), 0.5);
    EXPECT_EQ(dense_widths(spec), (std::vector<std::size_t>{32, 16, 4}));
    EXPECT_EQ(spec.pruning_rate, 0.5);
}

TEST(PrunedSpec, WidthFloorsAtOne) {
    EXPECT_EQ(dense_widths(build_pruned_spec(mlp_base({3}, {10}, 2), 0.05)), (std::vector<std::size_t>{1, 2}));
}

TEST(PrunedSpec, RoundsHalfUp) {
    EXPECT_EQ(pruned_width(5, 0.5), 3u);
    EXPECT_EQ(pruned_width(64, 0.6), 38u);
    EXPECT_EQ(pruned_width(64, 0.8), 51u);
    EXPECT_EQ(pruned_width(10, 0.25), 3u);
}

TEST(PrunedSpec, RejectsRatesOutsideUnitInterval) {
    const ModelSpec base = mlp_base({3}, {10}, 2);
    EXPECT_THROW(build_pruned_spec(base, 0.0), ValidationError);
    EXPECT_THROW(build_pruned_spec(base, -0.5), ValidationError);
    EXPECT_THROW(build_pruned_spec(base, 1.01), ValidationError);
}

TEST(PrunedSpec, CnnChannelsScaleAndOutputStays) {
    const ModelSpec base = cnn_base({1, 8, 8}, {16, 32}, 64, 10);
    const ModelSpec spec = build_pruned_spec(base, 0.6);
    std::vector<std::size_t> channels;
    for (const auto& l : spec.layers)
        if (const auto* c = std::get_if<Conv2d>(&l)) channels.push_back(c->channels);
    EXPECT_EQ(channels, (std::vector<std::size_t>{10, 19}));
    EXPECT_EQ(dense_widths(spec), (std::vector<std::size_t>{38, 10}));
}

TEST(PrunedSpec, InterfaceStableAndCountMonotone) {
    for (const ModelSpec& base : {mlp_base({12}, {128, 64}, 5), cnn_base({3, 8, 8}, {16, 32}, 64, 5)}) {
        std::size_t previous = 0;
        for (int i = 1; i <= 20; ++i) {
            const ModelSpec spec = build_pruned_spec(base, i / 20.0);
            const std::size_t count = parameter_count(spec);
            EXPECT_GE(count, previous);
            previous = count;
            Shape in{2};
            in.insert(in.end(), base.input_shape.begin(), base.input_shape.end());
            const auto z = model_forward(spec, init_params(spec, 1), Tensor(in, 0.5));
            EXPECT_EQ(z.rows(), 2u);
            EXPECT_EQ(z.cols(), 5u);
        }
    }
}

TEST(InitParams, DeterministicAndSeedSensitive) {
    const ModelSpec spec = mlp_base({8}, {16}, 3);
    EXPECT_EQ(init_params(spec, 7), init_params(spec, 7));
    EXPECT_NE(init_params(spec, 7), init_params(spec, 8));
    for (const auto& t : init_params(spec, 7).tensors)
        if (t.name.ends_with(".bias"))
            for (double v : t.tensor.values()) EXPECT_EQ(v, 0.0);
}

TEST(InitParams, WeightsWithinBoundWithZeroMean) {
    const ModelSpec spec = mlp_base({50}, {200}, 2);  // first weight: 10000 entries, fan_in 50
    const auto p = init_params(spec, 3);
    const auto& w = p.tensors[0].tensor;
    ASSERT_EQ(w.size(), 10000u);
    const double bound = std::sqrt(6.0 / 50.0);
    double sum = 0.0;
    for (double v : w.values()) {
        EXPECT_LE(std::abs(v), bound);
        sum += v;
    }
    // Uniform(-b, b) has sd b / sqrt(3).
    const double sigma = bound / std::sqrt(3.0);
    EXPECT_LT(std::abs(sum / w.size()), 3 * sigma / std::sqrt(10000.0));
}

TEST(Flatten, RoundTripAndZero) {
    const ModelSpec spec = cnn_base({2, 6, 6}, {3, 4}, 5, 3);
    const auto p = random_params(spec, 1);
    const auto flat = flatten_params(p);
    EXPECT_EQ(unflatten_params(spec, flat), p);
    for (double v : flatten_params(zero_params(spec))) EXPECT_EQ(v, 0.0);
    std::vector<double> shorter(flat.begin(), flat.end() - 1);
    EXPECT_THROW(unflatten_params(spec, shorter), ValidationError);
}

TEST(Flatten, LengthMatchesLayerCounting) {
    // 16 -> 128 -> 64 -> 4 counted by hand.
    const ModelSpec spec = mlp_base({16}, {128, 64}, 4);
    const std::size_t expected = (16 * 128 + 128) + (128 * 64 + 64) + (64 * 4 + 4);
    EXPECT_EQ(parameter_count(spec), expected);
    EXPECT_EQ(flatten_params(init_params(spec, 0)).size(), expected);
    // conv(1->2, 3x3) pool conv(2->3) pool flatten(3*2*2) dense 5 dense 3
    const ModelSpec cnn = cnn_base({1, 8, 8}, {2, 3}, 5, 3);
    EXPECT_EQ(parameter_count(cnn), (2 * 9 + 2) + (3 * 2 * 9 + 3) + (12 * 5 + 5) + (5 * 3 + 3));
}

TEST(Overlap, IdentityMapCoversEverything) {
    const ModelSpec spec = mlp_base({4}, {6}, 3);
    const auto map = overlap_map(spec, spec);
    for (std::size_t t = 0; t < map.slices.size(); ++t)
        for (std::size_t a = 0; a < map.slices[t].size(); ++a)
            EXPECT_EQ(map.slices[t][a], (IndexRange{0, map.large_shapes[t][a]}));
}

TEST(Overlap, PrefixSliceOfNestedDense) {
    // hidden dense 8 (input 4) versus its half: weight [4,4] inside [8,4].
    const ModelSpec large = mlp_base({4}, {8}, 2);
    const ModelSpec small = build_pruned_spec(large, 0.5);
    const auto map = overlap_map(large, small);
    EXPECT_EQ(map.slices[0], (std::vector<IndexRange>{{0, 4}, {0, 4}}));
    EXPECT_EQ(map.slices[2], (std::vector<IndexRange>{{0, 2}, {0, 4}}));
}

TEST(Overlap, DenseFourByTwoInsideEightByFour) {
    ModelSpec large;
    large.input_shape = {4};
    large.class_count = 2;
    large.layers = {Dense{8, 8}, Relu{}, Dense{4, 4}, Relu{}, Dense{2, 2, true}};
    ModelSpec small = large;
    small.layers = {Dense{8, 4}, Relu{}, Dense{4, 2}, Relu{}, Dense{2, 2, true}};
    small.pruning_rate = 0.5;
    const auto map = overlap_map(large, small);
    // dense1.weight is [out=2, in=4] inside [4, 8]
    EXPECT_EQ(map.slices[2], (std::vector<IndexRange>{{0, 2}, {0, 4}}));
}

TEST(Overlap, RoundTripThroughZeroedLargeModel) {
    const ModelSpec large = cnn_base({1, 8, 8}, {6, 8}, 10, 3);
    const ModelSpec small = build_pruned_spec(large, 0.5);
    const auto map = overlap_map(large, small);
    const auto sp = random_params(small, 4);
    ModelParams zeroed = zero_params(large);
    embed_submodel(zeroed, sp, map);
    EXPECT_EQ(extract_submodel(zeroed, small, map), sp);
    const auto lp = random_params(large, 5);
    ModelParams copy = lp;
    embed_submodel(copy, extract_submodel(lp, small, map), map);
    EXPECT_EQ(copy, lp);
}

TEST(Overlap, RejectsNonNestedSpecs) {
    const ModelSpec a = mlp_base({4}, {8}, 2);
    EXPECT_THROW(overlap_map(build_pruned_spec(a, 0.5), a), ValidationError);
    EXPECT_THROW(overlap_map(a, mlp_base({4}, {8, 2}, 2)), ValidationError);
    EXPECT_THROW(overlap_map(a, mlp_base({5}, {8}, 2)), ValidationError);
}

TEST(Overlap, VisitsEveryCoordinateOnce) {
    const ModelSpec large = cnn_base({2, 6, 6}, {4, 6}, 8, 3);
    const ModelSpec small = build_pruned_spec(large, 0.5);
    const auto map = overlap_map(large, small);
    const auto sp = zero_params(small);
    for (std::size_t t = 0; t < map.slices.size(); ++t) {
        std::vector<int> hits(sp.tensors[t].tensor.size(), 0);
        for_each_overlap(map, t, [&](std::size_t, std::size_t s) { ++hits[s]; });
        for (int h : hits) EXPECT_EQ(h, 1);
    }
}

TEST(Checkpoint, RoundTripsSpecAndValues) {
    const ModelSpec spec = build_pruned_spec(cnn_base({1, 6, 6}, {4, 6}, 8, 3), 0.8);
    const auto p = random_params(spec, 12);
    const auto path = std::filesystem::temp_directory_path() / "fedtsa_checkpoint_test.json";
    save_checkpoint(path, spec, p);
    const auto [spec2, p2] = load_checkpoint(path);
    EXPECT_EQ(spec2, spec);
    EXPECT_EQ(p2, p);
    std::filesystem::remove(path);
}

TEST(SpecJson, RoundTrip) {
    const ModelSpec spec = build_pruned_spec(mlp_base({2, 3}, {9, 5}, 4), 0.6);
    EXPECT_EQ(spec_from_json(spec_to_json(spec)), spec);
}
