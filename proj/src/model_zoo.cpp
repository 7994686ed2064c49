#include "fedtsa/model_zoo.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "fedtsa/error.hpp"
#include "fedtsa/rng.hpp"

namespace fedtsa {

using nlohmann::json;

ModelSpec mlp_base(const Shape& input_shape, const std::vector<std::size_t>& hidden, std::size_t classes) {
    ModelSpec spec;
    spec.input_shape = input_shape;
    spec.class_count = classes;
    if (input_shape.size() != 1) spec.layers.push_back(Flatten{});
    for (std::size_t w : hidden) {
        spec.layers.push_back(Dense{w, w, false});
        spec.layers.push_back(Relu{});
    }
    spec.layers.push_back(Dense{classes, classes, true});
    activation_shapes(spec);
    return spec;
}

ModelSpec cnn_base(const Shape& input_shape, const std::vector<std::size_t>& conv_channels, std::size_t dense_hidden,
                   std::size_t classes) {
    ModelSpec spec;
    spec.input_shape = input_shape;
    spec.class_count = classes;
    for (std::size_t ch : conv_channels) {
        spec.layers.push_back(Conv2d{ch, ch, 3, 1, 1});
        spec.layers.push_back(Relu{});
        spec.layers.push_back(MaxPool2d{2});
    }
    spec.layers.push_back(Flatten{});
    spec.layers.push_back(Dense{dense_hidden, dense_hidden, false});
    spec.layers.push_back(Relu{});
    spec.layers.push_back(Dense{classes, classes, true});
    activation_shapes(spec);
    return spec;
}

std::size_t pruned_width(std::size_t base_width, double rate) {
    // The epsilon keeps exact halves such as 0.05 * 10 from rounding down.
    const double scaled = std::floor(rate * static_cast<double>(base_width) + 0.5 + 1e-9);
    return std::max<std::size_t>(1, static_cast<std::size_t>(scaled));
}

ModelSpec build_pruned_spec(const ModelSpec& base, double rate) {
    if (!(rate > 0.0 && rate <= 1.0))
        throw ValidationError("pruning rate must lie in (0,1], got " + std::to_string(rate));
    ModelSpec out = base;
    out.pruning_rate = rate;
    for (Layer& layer : out.layers) {
        if (auto* d = std::get_if<Dense>(&layer)) {
            if (!d->output) d->units = pruned_width(d->base_units, rate);
        } else if (auto* c = std::get_if<Conv2d>(&layer)) {
            c->channels = pruned_width(c->base_channels, rate);
        }
    }
    activation_shapes(out);
    return out;
}

ModelParams init_params(const ModelSpec& spec, std::uint64_t seed) {
    Rng rng(seed);
    ModelParams params;
    for (const auto& ps : param_shapes(spec)) {
        Tensor t(ps.shape);
        const bool is_weight = ps.name.ends_with(".weight");
        if (is_weight) {
            const std::size_t fan_in = shape_size(ps.shape) / ps.shape[0];
            const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
            std::uniform_real_distribution<double> dist(-bound, bound);
            for (double& v : t.values()) v = dist(rng);
        }
        params.tensors.push_back({ps.name, std::move(t)});
    }
    return params;
}

ModelParams zero_params(const ModelSpec& spec) {
    ModelParams params;
    for (const auto& ps : param_shapes(spec)) params.tensors.push_back({ps.name, Tensor(ps.shape)});
    return params;
}

std::size_t parameter_count(const ModelSpec& spec) {
    std::size_t n = 0;
    for (const auto& ps : param_shapes(spec)) n += shape_size(ps.shape);
    return n;
}

std::vector<double> flatten_params(const ModelParams& params) {
    std::vector<double> out;
    std::size_t total = 0;
    for (const auto& t : params.tensors) total += t.tensor.size();
    out.reserve(total);
    for (const auto& t : params.tensors) out.insert(out.end(), t.tensor.values().begin(), t.tensor.values().end());
    return out;
}

ModelParams unflatten_params(const ModelSpec& spec, std::span<const double> values) {
    const auto shapes = param_shapes(spec);
    std::size_t total = 0;
    for (const auto& ps : shapes) total += shape_size(ps.shape);
    if (values.size() != total)
        throw ValidationError("parameter vector has " + std::to_string(values.size()) + " entries, model needs " +
                              std::to_string(total));
    ModelParams params;
    std::size_t offset = 0;
    for (const auto& ps : shapes) {
        const std::size_t n = shape_size(ps.shape);
        params.tensors.push_back(
            {ps.name, Tensor(ps.shape, std::vector<double>(values.begin() + offset, values.begin() + offset + n))});
        offset += n;
    }
    return params;
}

OverlapMap overlap_map(const ModelSpec& large, const ModelSpec& small) {
    auto fail = [](const std::string& why) { return ValidationError("specs are not nested: " + why); };
    if (large.input_shape != small.input_shape) throw fail("input shapes differ");
    if (large.class_count != small.class_count) throw fail("class counts differ");
    if (large.layers.size() != small.layers.size()) throw fail("layer counts differ");
    for (std::size_t i = 0; i < large.layers.size(); ++i) {
        const Layer& a = large.layers[i];
        const Layer& b = small.layers[i];
        if (a.index() != b.index()) throw fail("layer " + std::to_string(i) + " types differ");
        if (const auto* ca = std::get_if<Conv2d>(&a)) {
            const auto& cb = std::get<Conv2d>(b);
            if (ca->kernel != cb.kernel || ca->stride != cb.stride || ca->padding != cb.padding)
                throw fail("layer " + std::to_string(i) + " convolution geometry differs");
        }
        if (const auto* pa = std::get_if<MaxPool2d>(&a)) {
            if (pa->size != std::get<MaxPool2d>(b).size) throw fail("layer " + std::to_string(i) + " pool size differs");
        }
    }
    const auto ls = param_shapes(large);
    const auto ss = param_shapes(small);
    OverlapMap map;
    for (std::size_t t = 0; t < ls.size(); ++t) {
        std::vector<IndexRange> ranges;
        for (std::size_t a = 0; a < ls[t].shape.size(); ++a) {
            if (ss[t].shape[a] > ls[t].shape[a])
                throw fail(ls[t].name + " axis " + std::to_string(a) + " is wider in the small model");
            ranges.push_back({0, ss[t].shape[a]});
        }
        map.large_shapes.push_back(ls[t].shape);
        map.slices.push_back(std::move(ranges));
    }
    return map;
}

ModelParams extract_submodel(const ModelParams& large, const ModelSpec& small, const OverlapMap& map) {
    if (large.tensors.size() != map.slices.size())
        throw DimensionError("overlap map covers " + std::to_string(map.slices.size()) + " tensors, model has " +
                             std::to_string(large.tensors.size()));
    ModelParams out = zero_params(small);
    for (std::size_t t = 0; t < map.slices.size(); ++t) {
        if (large.tensors[t].tensor.shape() != map.large_shapes[t])
            throw DimensionError("tensor " + large.tensors[t].name + " does not match the overlap map");
        auto src = large.tensors[t].tensor.values();
        auto dst = out.tensors[t].tensor.values();
        for_each_overlap(map, t, [&](std::size_t l, std::size_t s) { dst[s] = src[l]; });
    }
    return out;
}

void embed_submodel(ModelParams& large, const ModelParams& small, const OverlapMap& map) {
    if (large.tensors.size() != map.slices.size() || small.tensors.size() != map.slices.size())
        throw DimensionError("overlap map does not match the parameter sets");
    for (std::size_t t = 0; t < map.slices.size(); ++t) {
        if (large.tensors[t].tensor.shape() != map.large_shapes[t])
            throw DimensionError("tensor " + large.tensors[t].name + " does not match the overlap map");
        auto dst = large.tensors[t].tensor.values();
        auto src = small.tensors[t].tensor.values();
        for_each_overlap(map, t, [&](std::size_t l, std::size_t s) { dst[l] = src[s]; });
    }
}

json spec_to_json(const ModelSpec& spec) {
    json layers = json::array();
    for (const Layer& layer : spec.layers) {
        json l{{"type", layer_kind(layer)}};
        if (const auto* d = std::get_if<Dense>(&layer)) {
            l["base_units"] = d->base_units;
            l["units"] = d->units;
            l["output"] = d->output;
        } else if (const auto* c = std::get_if<Conv2d>(&layer)) {
            l["base_channels"] = c->base_channels;
            l["channels"] = c->channels;
            l["kernel"] = c->kernel;
            l["stride"] = c->stride;
            l["padding"] = c->padding;
        } else if (const auto* p = std::get_if<MaxPool2d>(&layer)) {
            l["size"] = p->size;
        }
        layers.push_back(std::move(l));
    }
    return json{{"input_shape", spec.input_shape},
                {"class_count", spec.class_count},
                {"pruning_rate", spec.pruning_rate},
                {"layers", std::move(layers)}};
}

ModelSpec spec_from_json(const json& j) {
    try {
        ModelSpec spec;
        spec.input_shape = j.at("input_shape").get<Shape>();
        spec.class_count = j.at("class_count").get<std::size_t>();
        spec.pruning_rate = j.at("pruning_rate").get<double>();
        for (const auto& l : j.at("layers")) {
            const auto type = l.at("type").get<std::string>();
            if (type == "dense") {
                spec.layers.push_back(Dense{l.at("base_units").get<std::size_t>(), l.at("units").get<std::size_t>(),
                                            l.at("output").get<bool>()});
            } else if (type == "conv2d") {
                spec.layers.push_back(Conv2d{l.at("base_channels").get<std::size_t>(),
                                             l.at("channels").get<std::size_t>(), l.at("kernel").get<std::size_t>(),
                                             l.at("stride").get<std::size_t>(), l.at("padding").get<std::size_t>()});
            } else if (type == "relu") {
                spec.layers.push_back(Relu{});
            } else if (type == "maxpool2d") {
                spec.layers.push_back(MaxPool2d{l.at("size").get<std::size_t>()});
            } else if (type == "flatten") {
                spec.layers.push_back(Flatten{});
            } else {
                throw ValidationError("unknown layer type '" + type + "'");
            }
        }
        activation_shapes(spec);
        return spec;
    } catch (const json::exception& e) {
        throw ValidationError(std::string("malformed model spec: ") + e.what());
    }
}

void save_checkpoint(const std::filesystem::path& path, const ModelSpec& spec, const ModelParams& params) {
    check_params(spec, params);
    const json doc{{"format", "fedtsa-params"},
                   {"version", 1},
                   {"spec", spec_to_json(spec)},
                   {"values", flatten_params(params)}};
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestionError("cannot open checkpoint for writing: " + path.string());
    out << doc.dump() << '\n';
    if (!out) throw IngestionError("failed writing checkpoint: " + path.string());
}

std::pair<ModelSpec, ModelParams> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestionError("cannot open checkpoint: " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw IngestionError("checkpoint " + path.string() + " is not valid JSON: " + e.what());
    }
    if (doc.value("format", "") != "fedtsa-params" || doc.value("version", 0) != 1)
        throw IngestionError("checkpoint " + path.string() + " has an unsupported format/version");
    ModelSpec spec = spec_from_json(doc.at("spec"));
    const auto values = doc.at("values").get<std::vector<double>>();
    return {spec, unflatten_params(spec, values)};
}

} // namespace fedtsa
