#include "knfu/nn/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "knfu/errors.hpp"
#include "knfu/nn/losses.hpp"
#include "network.hpp"

namespace knfu::nn {

namespace {

void check_loss_spec(const LossSpec& loss, std::size_t rows, std::size_t C) {
  if (loss.labels.size() != rows)
    throw InputError("label count " + std::to_string(loss.labels.size()) +
                     " does not match batch size " + std::to_string(rows));
  for (int y : loss.labels)
    if (y < 0 || static_cast<std::size_t>(y) >= C)
      throw InputError("label " + std::to_string(y) + " out of range");
  if (!(loss.lambda >= 0.0)) throw InputError("lambda must be nonnegative");
  if ((loss.lambda > 0.0) != (loss.distill_target != nullptr))
    throw InputError("distillation target must be given iff lambda > 0");
  if (loss.distill_target &&
      (loss.distill_target->rows() != rows ||
       loss.distill_target->row_size() != C))
    throw InputError("distillation target shape does not match batch x classes");
}

/// Loss value and dLoss/dlogits for a logit matrix.
double loss_and_dlogits(const Tensor& z, const LossSpec& loss,
                        Buffer* dlogits) {
  const std::size_t B = z.rows(), C = z.row_size();
  const Tensor p = softmax(z, 1.0);
  double value = 0.0;
  if (dlogits) dlogits->assign(B * C, 0.0);
  if (loss.cross_entropy) {
    value = ce_loss(p, loss.labels);
    if (dlogits) {
      std::copy(p.values().begin(), p.values().end(), dlogits->begin());
      for (std::size_t i = 0; i < B; ++i)
        (*dlogits)[i * C + static_cast<std::size_t>(loss.labels[i])] -= 1.0;
    }
  }
  if (loss.lambda > 0.0) {
    const double T = loss.lambda;
    const double weight = loss.lambda * loss.lambda;
    const Tensor s = softmax(z, T);
    const Tensor t = soften(*loss.distill_target, T);
    value += weight * kl_loss(s, t);
    if (dlogits) {
      const double scale = weight / T;
      for (std::size_t k = 0; k < B * C; ++k)
        (*dlogits)[k] += scale * (s.values()[k] - t.values()[k]);
    }
  }
  if (dlogits)
    for (double& d : *dlogits) d /= static_cast<double>(B);
  return value;
}

Tensor gather_rows(const Tensor& src, std::span<const std::size_t> idx) {
  auto shape = src.shape();
  shape[0] = idx.size();
  const std::size_t n = src.row_size();
  Buffer values(idx.size() * n);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto row = src.row(idx[i]);
    std::copy(row.begin(), row.end(),
              values.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  return Tensor(std::move(shape), std::move(values));
}

}  // namespace

double composite_loss(const Model& model, const Tensor& batch,
                      const LossSpec& loss) {
  const Tensor z = logits(model, batch);
  check_loss_spec(loss, z.rows(), z.row_size());
  return loss_and_dlogits(z, loss, nullptr);
}

Gradient compute_gradient(const Model& model, const Tensor& batch,
                          const LossSpec& loss) {
  const auto plan = detail::compile(model.spec());
  if (batch.shape().size() < 2 || batch.row_size() != plan.input_size)
    throw InputError("batch rows do not match the model input size");
  const std::size_t B = batch.rows();
  check_loss_spec(loss, B, plan.num_classes);

  detail::Trace trace;
  auto z = detail::run_forward(plan, model.parameters(), batch.values(), B,
                               &trace);
  Gradient g;
  Buffer dlogits;
  g.loss = loss_and_dlogits(Tensor({B, plan.num_classes}, std::move(z)), loss,
                            &dlogits);
  g.values.assign(plan.parameter_count, 0.0);
  detail::run_backward(plan, model.parameters(), trace, dlogits, g.values);
  return g;
}

double backward_step(Model& model, const Tensor& batch, const LossSpec& loss,
                     SgdState& sgd) {
  if (!(sgd.learning_rate > 0.0)) throw InputError("learning rate must be positive");
  Gradient g = compute_gradient(model, batch, loss);
  auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    double gi = g.values[i];
    if (std::abs(gi) > sgd.grad_cap) {
      gi = std::copysign(sgd.grad_cap, gi);
      ++sgd.clipped;
    }
    params[i] -= sgd.learning_rate * gi;
  }
  return g.loss;
}

double gradient_check(const Model& model, const Tensor& batch,
                      const LossSpec& loss, double h) {
  const Gradient analytic = compute_gradient(model, batch, loss);
  Model probe = model;
  auto params = probe.parameters();
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + h;
    const double up = composite_loss(probe, batch, loss);
    params[i] = saved - h;
    const double down = composite_loss(probe, batch, loss);
    params[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double a = analytic.values[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

EpochStats train_epoch(Model& model, const Tensor& inputs,
                       std::span<const int> labels, const Tensor* targets,
                       double lambda, SgdState& sgd, Rng& rng) {
  const std::size_t n = inputs.rows();
  if (labels.size() != n) throw InputError("label count does not match inputs");
  if (targets && targets->rows() != n)
    throw InputError("distillation targets do not align with inputs");
  if (sgd.batch_size == 0) throw InputError("batch size must be positive");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  EpochStats stats;
  double loss_sum = 0.0;
  std::vector<int> batch_labels;
  for (std::size_t start = 0; start < n; start += sgd.batch_size) {
    const std::size_t count = std::min(sgd.batch_size, n - start);
    const std::span<const std::size_t> idx(order.data() + start, count);
    const Tensor x = gather_rows(inputs, idx);
    batch_labels.resize(count);
    for (std::size_t i = 0; i < count; ++i) batch_labels[i] = labels[idx[i]];
    Tensor t;
    if (targets) t = gather_rows(*targets, idx);
    LossSpec spec{batch_labels, targets ? &t : nullptr, targets ? lambda : 0.0};
    loss_sum += backward_step(model, x, spec, sgd) * static_cast<double>(count);
    ++stats.steps;
    stats.samples += count;
  }
  stats.mean_loss = n ? loss_sum / static_cast<double>(n) : 0.0;
  return stats;
}

}  // namespace knfu::nn
