#pragma once

#include <span>

#include "knfu/nn/tensor.hpp"

namespace knfu::nn {

inline constexpr double kEpsLog = 1e-12;

/// Mean of -ln max(p[y], eps) over rows.
double ce_loss(const Tensor& predictions, std::span<const int> labels);

/// Mean over rows of sum_j target_j * ln(target_j / student_j), in nats.
double kl_loss(const Tensor& student, const Tensor& target);

/// Re-softens probability rows at a temperature: softmax(ln(p) / T).
/// T == 1 returns the input unchanged.
Tensor soften(const Tensor& probabilities, double temperature);

/// Entropy of one probability row, nats.
double entropy(std::span<const double> row);

/// Index of the largest entry; ties go to the lowest index.
std::size_t argmax(std::span<const double> row);

}  // namespace knfu::nn
