#include "fedtsa/loss.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fedtsa/error.hpp"

namespace fedtsa {

namespace {

void check_temperature(double temperature) {
    if (!(temperature > 0.0) || !std::isfinite(temperature))
        throw ValidationError("temperature must be a positive finite number, got " + std::to_string(temperature));
}

template <class A, class B>
void check_same_shape(const A& a, const B& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw DimensionError(std::string(what) + ": shapes " + std::to_string(a.rows()) + "x" +
                             std::to_string(a.cols()) + " and " + std::to_string(b.rows()) + "x" +
                             std::to_string(b.cols()) + " differ");
}

} // namespace

ProbMatrix softmax_with_temperature(const LogitMatrix& logits, double temperature) {
    check_temperature(temperature);
    ProbMatrix out(logits.rows(), logits.cols());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        auto z = logits.row(r);
        auto p = out.row(r);
        const double peak = *std::max_element(z.begin(), z.end());
        double total = 0.0;
        for (std::size_t c = 0; c < z.size(); ++c) {
            p[c] = std::exp((z[c] - peak) / temperature);
            total += p[c];
        }
        for (double& v : p) v /= total;
    }
    return out;
}

LossResult cross_entropy(const LogitMatrix& logits, std::span<const std::size_t> labels) {
    if (labels.size() != logits.rows())
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(logits.rows()) + " rows");
    for (std::size_t r = 0; r < labels.size(); ++r)
        if (labels[r] >= logits.cols())
            throw ValidationError("cross_entropy: label " + std::to_string(labels[r]) + " at row " + std::to_string(r) +
                                  " outside [0," + std::to_string(logits.cols()) + ")");

    LossResult result{0.0, LogitMatrix(logits.rows(), logits.cols())};
    if (logits.rows() == 0) return result;
    const double inv_n = 1.0 / static_cast<double>(logits.rows());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        auto z = logits.row(r);
        const double peak = *std::max_element(z.begin(), z.end());
        double total = 0.0;
        for (double v : z) total += std::exp(v - peak);
        const double log_norm = peak + std::log(total);
        result.loss += log_norm - z[labels[r]];
        auto g = result.grad.row(r);
        for (std::size_t c = 0; c < z.size(); ++c)
            g[c] = (std::exp(z[c] - log_norm) - (c == labels[r] ? 1.0 : 0.0)) * inv_n;
    }
    result.loss *= inv_n;
    return result;
}

LossResult kl_divergence(const ProbMatrix& target, const LogitMatrix& model_logits, double temperature) {
    check_same_shape(target, model_logits, "kl_divergence");
    check_distribution_rows(target);
    const ProbMatrix q = softmax_with_temperature(model_logits, temperature);
    LossResult result{0.0, LogitMatrix(q.rows(), q.cols())};
    for (std::size_t r = 0; r < q.rows(); ++r) {
        auto t = target.row(r);
        auto p = q.row(r);
        auto g = result.grad.row(r);
        // Mass whose log term is live (not clamped); gradient of -sum t log max(p, eps).
        double live_mass = 0.0;
        bool clamped = false;
        for (std::size_t c = 0; c < t.size(); ++c) {
            if (t[c] <= 0.0) continue;
            result.loss += t[c] * (std::log(std::max(t[c], kProbabilityFloor)) -
                                   std::log(std::max(p[c], kProbabilityFloor)));
            if (p[c] >= kProbabilityFloor)
                live_mass += t[c];
            else
                clamped = true;
        }
        // Unclamped rows use the textbook (p - t) / T so that t == p gives an exactly zero gradient.
        for (std::size_t c = 0; c < t.size(); ++c) {
            if (!clamped) {
                g[c] = (p[c] - t[c]) / temperature;
                continue;
            }
            const double own = p[c] >= kProbabilityFloor ? t[c] : 0.0;
            g[c] = (p[c] * live_mass - own) / temperature;
        }
    }
    return result;
}

LossResult kl_divergence_from_model(const LogitMatrix& model_logits, const ProbMatrix& target, double temperature) {
    check_same_shape(target, model_logits, "kl_divergence_from_model");
    check_distribution_rows(target);
    const ProbMatrix q = softmax_with_temperature(model_logits, temperature);
    LossResult result{0.0, LogitMatrix(q.rows(), q.cols())};
    std::vector<double> ratio(q.cols());
    for (std::size_t r = 0; r < q.rows(); ++r) {
        auto t = target.row(r);
        auto p = q.row(r);
        auto g = result.grad.row(r);
        double expected = 0.0;
        for (std::size_t c = 0; c < p.size(); ++c) {
            ratio[c] = std::log(std::max(p[c], kProbabilityFloor)) - std::log(std::max(t[c], kProbabilityFloor));
            result.loss += p[c] * ratio[c];
            expected += p[c] * ratio[c];
        }
        // d/dz_k sum_c p_c ratio_c = p_k (ratio_k - E_p[ratio]) / T  (the +1 from d log p cancels)
        for (std::size_t c = 0; c < p.size(); ++c) g[c] = p[c] * (ratio[c] - expected) / temperature;
    }
    return result;
}

double combined_loss(double kl, double ce, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw ValidationError("loss weight alpha must lie in [0,1], got " + std::to_string(alpha));
    if (alpha == 1.0) return kl;
    if (alpha == 0.0) return ce;
    return alpha * kl + (1.0 - alpha) * ce;
}

LogitMatrix combined_grad(const LogitMatrix& kl_grad, const LogitMatrix& ce_grad, double alpha) {
    check_same_shape(kl_grad, ce_grad, "combined_grad");
    if (!(alpha >= 0.0 && alpha <= 1.0))
        throw ValidationError("loss weight alpha must lie in [0,1], got " + std::to_string(alpha));
    if (alpha == 1.0) return kl_grad;
    if (alpha == 0.0) return ce_grad;
    LogitMatrix out(kl_grad.rows(), kl_grad.cols());
    auto a = kl_grad.values();
    auto b = ce_grad.values();
    auto o = out.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = alpha * a[i] + (1.0 - alpha) * b[i];
    return out;
}

ModelParams sgd_step(const ModelParams& params, const GradientSet& grads, double eta) {
    if (!(eta >= 0.0) || !std::isfinite(eta))
        throw ValidationError("learning rate must be a non-negative finite number, got " + std::to_string(eta));
    if (grads.tensors.size() != params.tensors.size())
        throw DimensionError("sgd_step: " + std::to_string(grads.tensors.size()) + " gradients for " +
                             std::to_string(params.tensors.size()) + " parameter tensors");
    ModelParams out = params;
    for (std::size_t i = 0; i < out.tensors.size(); ++i) {
        auto& w = out.tensors[i].tensor;
        const auto& g = grads.tensors[i];
        if (w.shape() != g.shape())
            throw DimensionError("sgd_step: gradient for " + out.tensors[i].name + " has shape " +
                                 shape_to_string(g.shape()) + ", parameter has " + shape_to_string(w.shape()));
        auto wv = w.values();
        auto gv = g.values();
        for (std::size_t k = 0; k < wv.size(); ++k) wv[k] -= eta * gv[k];
    }
    return out;
}

void check_distribution_rows(const ProbMatrix& probs, double tol) {
    for (std::size_t r = 0; r < probs.rows(); ++r) {
        double total = 0.0;
        for (double v : probs.row(r)) {
            if (!(v >= 0.0) || !std::isfinite(v))
                throw ValidationError("row " + std::to_string(r) + " holds an invalid probability");
            total += v;
        }
        if (std::abs(total - 1.0) > tol)
            throw ValidationError("row " + std::to_string(r) + " sums to " + std::to_string(total) + ", not 1");
    }
}

} // namespace fedtsa
