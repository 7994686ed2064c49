#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

#include "fedtsa/nn.hpp"

namespace fedtsa {

// MLP: input -> hidden... -> classes, ReLU between dense layers.
ModelSpec mlp_base(const Shape& input_shape, const std::vector<std::size_t>& hidden, std::size_t classes);

// CNN: [conv(3x3, pad 1) -> relu -> maxpool 2] per channel entry, flatten,
// dense hidden -> relu, dense classes.
ModelSpec cnn_base(const Shape& input_shape, const std::vector<std::size_t>& conv_channels, std::size_t dense_hidden,
                   std::size_t classes);

// max(1, round_half_up(p * w)).
std::size_t pruned_width(std::size_t base_width, double rate);

// Scales every hidden width/channel count from its base width; input shape and
// the output layer stay fixed.
ModelSpec build_pruned_spec(const ModelSpec& base, double rate);

// Fan-in scaled uniform weights in +-sqrt(6 / fan_in), zero biases.
ModelParams init_params(const ModelSpec& spec, std::uint64_t seed);

ModelParams zero_params(const ModelSpec& spec);

std::size_t parameter_count(const ModelSpec& spec);

std::vector<double> flatten_params(const ModelParams& params);
ModelParams unflatten_params(const ModelSpec& spec, std::span<const double> values);

struct IndexRange {
    std::size_t begin = 0;
    std::size_t end = 0;
    friend bool operator==(const IndexRange&, const IndexRange&) = default;
};

// For every parameter tensor, the leading slice of the large tensor occupied by
// the small model (one range per axis).
struct OverlapMap {
    std::vector<Shape> large_shapes;
    std::vector<std::vector<IndexRange>> slices;
};

OverlapMap overlap_map(const ModelSpec& large, const ModelSpec& small);

// Reads the small model out of the large parameters.
ModelParams extract_submodel(const ModelParams& large, const ModelSpec& small, const OverlapMap& map);

// Writes the small model into its slice of the large parameters.
void embed_submodel(ModelParams& large, const ModelParams& small, const OverlapMap& map);

// Calls fn(large_flat_index, small_flat_index) for every overlapped coordinate of tensor t.
template <class Fn>
void for_each_overlap(const OverlapMap& map, std::size_t t, Fn&& fn);

nlohmann::json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& j);

// Checkpoint file: one JSON document
//   {"format":"fedtsa-params","version":1,"spec":{...},"values":[...]}
// with values in flatten_params order.
void save_checkpoint(const std::filesystem::path& path, const ModelSpec& spec, const ModelParams& params);
std::pair<ModelSpec, ModelParams> load_checkpoint(const std::filesystem::path& path);

template <class Fn>
void for_each_overlap(const OverlapMap& map, std::size_t t, Fn&& fn) {
    const Shape& large = map.large_shapes[t];
    const auto& ranges = map.slices[t];
    const std::size_t rank = large.size();
    std::vector<std::size_t> strides(rank, 1);
    for (std::size_t a = rank; a-- > 1;) strides[a - 1] = strides[a] * large[a];
    std::vector<std::size_t> idx(rank, 0);
    for (std::size_t a = 0; a < rank; ++a) {
        if (ranges[a].end == ranges[a].begin) return;
        idx[a] = ranges[a].begin;
    }
    std::size_t small_flat = 0;
    while (true) {
        std::size_t large_flat = 0;
        for (std::size_t a = 0; a < rank; ++a) large_flat += idx[a] * strides[a];
        fn(large_flat, small_flat++);
        std::size_t a = rank;
        while (a-- > 0) {
            if (++idx[a] < ranges[a].end) break;
            idx[a] = ranges[a].begin;
            if (a == 0) return;
        }
    }
}

} // namespace fedtsa
