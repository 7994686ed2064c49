#include "fedtsa/nn.hpp"

#include <algorithm>
#include <limits>

#include "fedtsa/error.hpp"

namespace fedtsa {

namespace {

template <class... Fs>
struct Overloaded : Fs... {
    using Fs::operator()...;
};
template <class... Fs>
Overloaded(Fs...) -> Overloaded<Fs...>;

std::string layer_label(const ModelSpec& spec, std::size_t i) {
    return "layer " + std::to_string(i) + " (" + layer_kind(spec.layers[i]) + ")";
}

std::string param_prefix(const Layer& layer, std::size_t i) {
    return (std::holds_alternative<Dense>(layer) ? "dense" : "conv") + std::to_string(i);
}

void dense_forward(const Tensor& w, const Tensor& b, std::span<const double> x, std::span<double> y,
                   std::size_t batch, std::size_t in, std::size_t out) {
    auto wv = w.values();
    auto bv = b.values();
    for (std::size_t n = 0; n < batch; ++n) {
        const double* xr = x.data() + n * in;
        double* yr = y.data() + n * out;
        for (std::size_t o = 0; o < out; ++o) {
            const double* wr = wv.data() + o * in;
            double acc = bv[o];
            for (std::size_t i = 0; i < in; ++i) acc += wr[i] * xr[i];
            yr[o] = acc;
        }
    }
}

struct ConvGeometry {
    std::size_t in_c, in_h, in_w, out_c, out_h, out_w, k, stride, pad;
};

ConvGeometry conv_geometry(const Conv2d& conv, const Shape& in, const Shape& out) {
    return {in[0], in[1], in[2], out[0], out[1], out[2], conv.kernel, conv.stride, conv.padding};
}

// Calls fn(out_index, in_index, weight_index) for every multiply-add of the convolution.
template <class Fn>
void for_each_conv_tap(const ConvGeometry& g, std::size_t n, Fn&& fn) {
    const std::size_t in_plane = g.in_h * g.in_w;
    const std::size_t out_plane = g.out_h * g.out_w;
    for (std::size_t oc = 0; oc < g.out_c; ++oc) {
        for (std::size_t ic = 0; ic < g.in_c; ++ic) {
            for (std::size_t ky = 0; ky < g.k; ++ky) {
                for (std::size_t kx = 0; kx < g.k; ++kx) {
                    const std::size_t widx = ((oc * g.in_c + ic) * g.k + ky) * g.k + kx;
                    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                        const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                        if (iy < 0 || iy >= static_cast<long>(g.in_h)) continue;
                        for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                            if (ix < 0 || ix >= static_cast<long>(g.in_w)) continue;
                            fn((n * g.out_c + oc) * out_plane + oy * g.out_w + ox,
                               (n * g.in_c + ic) * in_plane + static_cast<std::size_t>(iy) * g.in_w +
                                   static_cast<std::size_t>(ix),
                               widx);
                        }
                    }
                }
            }
        }
    }
}

} // namespace

std::string layer_kind(const Layer& layer) {
    return std::visit(Overloaded{[](const Dense&) { return std::string("dense"); },
                                 [](const Conv2d&) { return std::string("conv2d"); },
                                 [](const Relu&) { return std::string("relu"); },
                                 [](const MaxPool2d&) { return std::string("maxpool2d"); },
                                 [](const Flatten&) { return std::string("flatten"); }},
                      layer);
}

std::vector<Shape> activation_shapes(const ModelSpec& spec) {
    if (spec.input_shape.empty() || shape_size(spec.input_shape) == 0)
        throw DimensionError("model input shape " + shape_to_string(spec.input_shape) + " is empty");
    std::vector<Shape> shapes{spec.input_shape};
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const Shape& in = shapes.back();
        auto fail = [&](const std::string& why) {
            return DimensionError(layer_label(spec, i) + ": " + why + ", input shape " + shape_to_string(in));
        };
        Shape out = std::visit(
            Overloaded{
                [&](const Dense& d) -> Shape {
                    if (in.size() != 1) throw fail("dense layer needs a rank-1 input");
                    if (d.units == 0) throw fail("zero units");
                    return {d.units};
                },
                [&](const Conv2d& c) -> Shape {
                    if (in.size() != 3) throw fail("conv2d needs a [channels,height,width] input");
                    if (c.channels == 0 || c.kernel == 0 || c.stride == 0) throw fail("degenerate convolution");
                    if (in[1] + 2 * c.padding < c.kernel || in[2] + 2 * c.padding < c.kernel)
                        throw fail("kernel larger than padded input");
                    return {c.channels, (in[1] + 2 * c.padding - c.kernel) / c.stride + 1,
                            (in[2] + 2 * c.padding - c.kernel) / c.stride + 1};
                },
                [&](const Relu&) -> Shape { return in; },
                [&](const MaxPool2d& p) -> Shape {
                    if (in.size() != 3) throw fail("maxpool2d needs a [channels,height,width] input");
                    if (p.size == 0 || in[1] < p.size || in[2] < p.size) throw fail("pool window larger than input");
                    return {in[0], in[1] / p.size, in[2] / p.size};
                },
                [&](const Flatten&) -> Shape { return {shape_size(in)}; },
            },
            spec.layers[i]);
        shapes.push_back(std::move(out));
    }
    if (spec.class_count < 2) throw DimensionError("model needs at least 2 classes");
    if (shapes.back() != Shape{spec.class_count})
        throw DimensionError("model output shape " + shape_to_string(shapes.back()) + " does not match " +
                             std::to_string(spec.class_count) + " classes");
    return shapes;
}

std::vector<ParamShape> param_shapes(const ModelSpec& spec) {
    const auto shapes = activation_shapes(spec);
    std::vector<ParamShape> out;
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const Layer& layer = spec.layers[i];
        if (const auto* d = std::get_if<Dense>(&layer)) {
            out.push_back({param_prefix(layer, i) + ".weight", {d->units, shapes[i][0]}, i});
            out.push_back({param_prefix(layer, i) + ".bias", {d->units}, i});
        } else if (const auto* c = std::get_if<Conv2d>(&layer)) {
            out.push_back({param_prefix(layer, i) + ".weight", {c->channels, shapes[i][0], c->kernel, c->kernel}, i});
            out.push_back({param_prefix(layer, i) + ".bias", {c->channels}, i});
        }
    }
    return out;
}

void check_params(const ModelSpec& spec, const ModelParams& params) {
    const auto expected = param_shapes(spec);
    if (expected.size() != params.tensors.size())
        throw DimensionError("model expects " + std::to_string(expected.size()) + " parameter tensors, got " +
                             std::to_string(params.tensors.size()));
    for (std::size_t i = 0; i < expected.size(); ++i) {
        if (params.tensors[i].tensor.shape() != expected[i].shape)
            throw DimensionError(layer_label(spec, expected[i].layer) + ": parameter " + expected[i].name +
                                 " expects shape " + shape_to_string(expected[i].shape) + ", got " +
                                 shape_to_string(params.tensors[i].tensor.shape()));
    }
}

ForwardTrace trace_forward(const ModelSpec& spec, const ModelParams& params, const Tensor& batch) {
    const auto shapes = activation_shapes(spec);
    check_params(spec, params);
    if (batch.rank() != spec.input_shape.size() + 1 ||
        !std::equal(spec.input_shape.begin(), spec.input_shape.end(), batch.shape().begin() + 1))
        throw DimensionError("batch shape " + shape_to_string(batch.shape()) + " does not match model input " +
                             shape_to_string(spec.input_shape) + " at layer 0 (" +
                             (spec.layers.empty() ? std::string("input") : layer_kind(spec.layers[0])) + ")");

    ForwardTrace trace;
    trace.batch = batch.dim(0);
    const std::size_t n = trace.batch;
    trace.activations.reserve(spec.layers.size() + 1);
    trace.activations.push_back(batch);
    trace.argmax.resize(spec.layers.size());

    std::size_t p = 0;  // next parameter tensor
    for (std::size_t i = 0; i < spec.layers.size(); ++i) {
        const Tensor& x = trace.activations.back();
        Shape out_shape{n};
        out_shape.insert(out_shape.end(), shapes[i + 1].begin(), shapes[i + 1].end());
        Tensor y(out_shape);
        const Layer& layer = spec.layers[i];
        if (std::holds_alternative<Dense>(layer)) {
            dense_forward(params.tensors[p].tensor, params.tensors[p + 1].tensor, x.values(), y.values(), n,
                          shapes[i][0], shapes[i + 1][0]);
            p += 2;
        } else if (const auto* c = std::get_if<Conv2d>(&layer)) {
            const auto g = conv_geometry(*c, shapes[i], shapes[i + 1]);
            auto w = params.tensors[p].tensor.values();
            auto b = params.tensors[p + 1].tensor.values();
            auto xv = x.values();
            auto yv = y.values();
            const std::size_t plane = g.out_h * g.out_w;
            for (std::size_t s = 0; s < n; ++s) {
                for (std::size_t oc = 0; oc < g.out_c; ++oc)
                    std::fill_n(yv.begin() + (s * g.out_c + oc) * plane, plane, b[oc]);
                for_each_conv_tap(g, s, [&](std::size_t o, std::size_t in, std::size_t wi) { yv[o] += w[wi] * xv[in]; });
            }
            p += 2;
        } else if (std::holds_alternative<Relu>(layer)) {
            auto xv = x.values();
            auto yv = y.values();
            for (std::size_t k = 0; k < xv.size(); ++k) yv[k] = xv[k] > 0.0 ? xv[k] : 0.0;
        } else if (const auto* pool = std::get_if<MaxPool2d>(&layer)) {
            const Shape& in = shapes[i];
            const Shape& out = shapes[i + 1];
            auto xv = x.values();
            auto yv = y.values();
            auto& winners = trace.argmax[i];
            winners.resize(y.size());
            std::size_t o = 0;
            for (std::size_t s = 0; s < n; ++s)
                for (std::size_t ch = 0; ch < in[0]; ++ch)
                    for (std::size_t oy = 0; oy < out[1]; ++oy)
                        for (std::size_t ox = 0; ox < out[2]; ++ox, ++o) {
                            double best = -std::numeric_limits<double>::infinity();
                            std::size_t best_idx = 0;
                            for (std::size_t dy = 0; dy < pool->size; ++dy)
                                for (std::size_t dx = 0; dx < pool->size; ++dx) {
                                    const std::size_t idx = ((s * in[0] + ch) * in[1] + oy * pool->size + dy) * in[2] +
                                                            ox * pool->size + dx;
                                    if (xv[idx] > best) {
                                        best = xv[idx];
                                        best_idx = idx;
                                    }
                                }
                            yv[o] = best;
                            winners[o] = best_idx;
                        }
        } else {  // Flatten
            std::copy(x.values().begin(), x.values().end(), y.values().begin());
        }
        trace.activations.push_back(std::move(y));
    }
    return trace;
}

LogitMatrix model_forward(const ModelSpec& spec, const ModelParams& params, const Tensor& batch) {
    auto trace = trace_forward(spec, params, batch);
    Tensor& out = trace.activations.back();
    return LogitMatrix(trace.batch, spec.class_count, std::vector<double>(out.values().begin(), out.values().end()));
}

GradientSet backward(const ModelSpec& spec, const ModelParams& params, const ForwardTrace& trace,
                     const LogitMatrix& loss_grad) {
    const auto shapes = activation_shapes(spec);
    const std::size_t n = trace.batch;
    if (loss_grad.rows() != n || loss_grad.cols() != spec.class_count)
        throw DimensionError("loss gradient is " + std::to_string(loss_grad.rows()) + "x" +
                             std::to_string(loss_grad.cols()) + ", forward logits are " + std::to_string(n) + "x" +
                             std::to_string(spec.class_count));

    GradientSet grads;
    for (const auto& t : params.tensors) grads.tensors.emplace_back(t.tensor.shape());

    std::vector<double> g(loss_grad.values().begin(), loss_grad.values().end());
    std::size_t p = params.tensors.size();
    for (std::size_t i = spec.layers.size(); i-- > 0;) {
        const Tensor& x = trace.activations[i];
        const bool need_input_grad = i > 0;
        std::vector<double> gx(need_input_grad ? x.size() : 0, 0.0);
        const Layer& layer = spec.layers[i];
        if (std::holds_alternative<Dense>(layer)) {
            p -= 2;
            const std::size_t in = shapes[i][0];
            const std::size_t out = shapes[i + 1][0];
            auto w = params.tensors[p].tensor.values();
            auto dw = grads.tensors[p].values();
            auto db = grads.tensors[p + 1].values();
            auto xv = x.values();
            for (std::size_t s = 0; s < n; ++s) {
                const double* xr = xv.data() + s * in;
                for (std::size_t o = 0; o < out; ++o) {
                    const double go = g[s * out + o];
                    if (go == 0.0) continue;
                    db[o] += go;
                    double* dwr = dw.data() + o * in;
                    for (std::size_t k = 0; k < in; ++k) dwr[k] += go * xr[k];
                    if (need_input_grad) {
                        const double* wr = w.data() + o * in;
                        double* gxr = gx.data() + s * in;
                        for (std::size_t k = 0; k < in; ++k) gxr[k] += go * wr[k];
                    }
                }
            }
        } else if (const auto* c = std::get_if<Conv2d>(&layer)) {
            p -= 2;
            const auto geo = conv_geometry(*c, shapes[i], shapes[i + 1]);
            auto w = params.tensors[p].tensor.values();
            auto dw = grads.tensors[p].values();
            auto db = grads.tensors[p + 1].values();
            auto xv = x.values();
            const std::size_t plane = geo.out_h * geo.out_w;
            for (std::size_t s = 0; s < n; ++s) {
                for (std::size_t oc = 0; oc < geo.out_c; ++oc)
                    for (std::size_t k = 0; k < plane; ++k) db[oc] += g[(s * geo.out_c + oc) * plane + k];
                for_each_conv_tap(geo, s, [&](std::size_t o, std::size_t in, std::size_t wi) {
                    dw[wi] += g[o] * xv[in];
                    if (need_input_grad) gx[in] += g[o] * w[wi];
                });
            }
        } else if (std::holds_alternative<Relu>(layer)) {
            if (need_input_grad) {
                auto xv = x.values();
                for (std::size_t k = 0; k < gx.size(); ++k) gx[k] = xv[k] > 0.0 ? g[k] : 0.0;
            }
        } else if (std::holds_alternative<MaxPool2d>(layer)) {
            if (need_input_grad) {
                const auto& winners = trace.argmax[i];
                for (std::size_t k = 0; k < winners.size(); ++k) gx[winners[k]] += g[k];
            }
        } else {  // Flatten
            if (need_input_grad) gx = g;
        }
        g = std::move(gx);
    }
    return grads;
}

GradientSet model_backward(const ModelSpec& spec, const ModelParams& params, const Tensor& batch,
                           const LogitMatrix& loss_grad) {
    const auto trace = trace_forward(spec, params, batch);
    return backward(spec, params, trace, loss_grad);
}

} // namespace fedtsa
