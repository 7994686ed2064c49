#pragma once

#include <cstddef>
#include <string>
#include <variant>
#include <vector>

#include "fedtsa/tensor.hpp"

namespace fedtsa {

// Fully connected layer. `units` is the (possibly pruned) width and
// `base_units` the unpruned width it was derived from. The output layer
// carries output=true and is never pruned.
struct Dense {
    std::size_t base_units = 0;
    std::size_t units = 0;
    bool output = false;
    friend bool operator==(const Dense&, const Dense&) = default;
};

// 2-D convolution over [channels, height, width] inputs.
struct Conv2d {
    std::size_t base_channels = 0;
    std::size_t channels = 0;
    std::size_t kernel = 3;
    std::size_t stride = 1;
    std::size_t padding = 0;
    friend bool operator==(const Conv2d&, const Conv2d&) = default;
};

struct Relu {
    friend bool operator==(const Relu&, const Relu&) = default;
};

// Non-overlapping max pooling (window == stride), floor semantics.
struct MaxPool2d {
    std::size_t size = 2;
    friend bool operator==(const MaxPool2d&, const MaxPool2d&) = default;
};

struct Flatten {
    friend bool operator==(const Flatten&, const Flatten&) = default;
};

using Layer = std::variant<Dense, Conv2d, Relu, MaxPool2d, Flatten>;

std::string layer_kind(const Layer& layer);

struct ModelSpec {
    Shape input_shape;
    std::vector<Layer> layers;
    double pruning_rate = 1.0;
    std::size_t class_count = 0;

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
    friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

// Learnable tensors in layer order: weight then bias for every Dense/Conv2d.
struct ModelParams {
    std::vector<NamedTensor> tensors;
    friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

// One gradient tensor per parameter tensor, same order and shapes.
struct GradientSet {
    std::vector<Tensor> tensors;
};

struct ParamShape {
    std::string name;
    Shape shape;
    std::size_t layer = 0;
};

// Per-layer activation shapes (excluding batch); element i is the input of
// layer i, the last element is the model output. Throws DimensionError
// naming the first layer whose input does not fit.
std::vector<Shape> activation_shapes(const ModelSpec& spec);

// Validates the spec (layer fit, output width == class_count) and returns the
// expected parameter shapes.
std::vector<ParamShape> param_shapes(const ModelSpec& spec);

void check_params(const ModelSpec& spec, const ModelParams& params);

// Forward pass with everything backward needs.
struct ForwardTrace {
    std::size_t batch = 0;
    std::vector<Tensor> activations;              // input of each layer, then output
    std::vector<std::vector<std::size_t>> argmax;  // max-pool winners, per layer (empty otherwise)
};

ForwardTrace trace_forward(const ModelSpec& spec, const ModelParams& params, const Tensor& batch);

// Pre-softmax logits, one row per example.
LogitMatrix model_forward(const ModelSpec& spec, const ModelParams& params, const Tensor& batch);

// Gradients of sum_i <loss_grad_i, logits_i> w.r.t. every parameter.
GradientSet backward(const ModelSpec& spec, const ModelParams& params, const ForwardTrace& trace,
                     const LogitMatrix& loss_grad);

GradientSet model_backward(const ModelSpec& spec, const ModelParams& params, const Tensor& batch,
                           const LogitMatrix& loss_grad);

} // namespace fedtsa
