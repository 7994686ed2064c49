#pragma once

#include <cstddef>
#include <span>

#include "fedtsa/nn.hpp"
#include "fedtsa/tensor.hpp"

namespace fedtsa {

// Lower clamp for probabilities inside KL logarithms.
inline constexpr double kProbabilityFloor = 1e-12;

struct LossResult {
    double loss = 0.0;
    LogitMatrix grad;  // d loss / d logits
};

// Row-wise softmax(z / T) with per-row max subtraction. T must be > 0.
ProbMatrix softmax_with_temperature(const LogitMatrix& logits, double temperature);

// Mean over rows of -log softmax(z)[label].
LossResult cross_entropy(const LogitMatrix& logits, std::span<const std::size_t> labels);

// sum_i sum_c target * log(target / softmax_T(logits)), target held constant.
// Summed (not averaged) over rows.
LossResult kl_divergence(const ProbMatrix& target, const LogitMatrix& model_logits, double temperature);

// Reverse direction: sum_i sum_c q * log(q / target) with q = softmax_T(logits).
LossResult kl_divergence_from_model(const LogitMatrix& model_logits, const ProbMatrix& target, double temperature);

// alpha * kl + (1 - alpha) * ce, alpha in [0, 1].
double combined_loss(double kl, double ce, double alpha);

// Same weights applied to gradients of the two terms.
LogitMatrix combined_grad(const LogitMatrix& kl_grad, const LogitMatrix& ce_grad, double alpha);

// params - eta * grads, tensor by tensor. eta must be >= 0.
ModelParams sgd_step(const ModelParams& params, const GradientSet& grads, double eta);

// Throws ValidationError unless every row is a distribution within `tol`.
void check_distribution_rows(const ProbMatrix& probs, double tol = 1e-6);

} // namespace fedtsa
