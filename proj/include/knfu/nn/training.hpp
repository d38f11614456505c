#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "knfu/nn/model.hpp"
#include "knfu/nn/tensor.hpp"
#include "knfu/rng.hpp"

namespace knfu::nn {

inline constexpr double kGradCap = 5.0;

struct SgdState {
  double learning_rate = 0.01;
  std::size_t batch_size = 16;
  double grad_cap = kGradCap;
  /// Number of gradient components clipped so far.
  std::size_t clipped = 0;
};

/// Composite objective: CE(labels) + lambda^2 * KL(soften(target, lambda) ||
/// softmax(logits / lambda)). With lambda == 0 the target is ignored.
struct LossSpec {
  std::span<const int> labels;
  const Tensor* distill_target = nullptr;
  double lambda = 0.0;
  /// false drops the CE term, leaving the distillation term alone.
  bool cross_entropy = true;
};

struct Gradient {
  double loss = 0.0;
  Buffer values;
};

double composite_loss(const Model& model, const Tensor& batch,
                      const LossSpec& loss);

/// Analytic gradient of composite_loss with respect to every parameter.
Gradient compute_gradient(const Model& model, const Tensor& batch,
                          const LossSpec& loss);

/// One SGD step on the composite loss. Components beyond `grad_cap` are
/// clipped and counted. Returns the pre-step loss.
double backward_step(Model& model, const Tensor& batch, const LossSpec& loss,
                     SgdState& sgd);

/// Max over parameters of |analytic - numeric| / max(|a|, |n|, 1e-8), using
/// central differences with step h.
double gradient_check(const Model& model, const Tensor& batch,
                      const LossSpec& loss, double h = 1e-5);

struct EpochStats {
  double mean_loss = 0.0;
  std::size_t steps = 0;
  std::size_t samples = 0;
};

/// One shuffled pass over (inputs, labels) in mini-batches of
/// `sgd.batch_size`. When `targets` is given its rows align with `inputs`.
EpochStats train_epoch(Model& model, const Tensor& inputs,
                       std::span<const int> labels, const Tensor* targets,
                       double lambda, SgdState& sgd, Rng& rng);

}  // namespace knfu::nn
