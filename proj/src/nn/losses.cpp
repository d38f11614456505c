#include "knfu/nn/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "knfu/errors.hpp"

namespace knfu::nn {

double ce_loss(const Tensor& predictions, std::span<const int> labels) {
  const std::size_t n = predictions.rows(), C = predictions.row_size();
  if (labels.size() != n)
    throw InputError("label count does not match prediction rows");
  if (n == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= C)
      throw InputError("label " + std::to_string(labels[i]) + " out of range");
    sum -= std::log(std::max(predictions(i, static_cast<std::size_t>(labels[i])),
                             kEpsLog));
  }
  return sum / static_cast<double>(n);
}

double kl_loss(const Tensor& student, const Tensor& target) {
  if (student.shape() != target.shape())
    throw InputError("kl_loss: student and target shapes differ");
  const std::size_t n = student.rows();
  if (n == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto s = student.row(i);
    const auto t = target.row(i);
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (t[j] <= 0.0) continue;
      sum += t[j] * std::log(std::max(t[j], kEpsLog) / std::max(s[j], kEpsLog));
    }
  }
  return std::max(0.0, sum / static_cast<double>(n));
}

Tensor soften(const Tensor& p, double temperature) {
  if (!(temperature > 0.0)) throw InputError("temperature must be positive");
  if (temperature == 1.0) return p;
  Tensor out = p;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    double m = -std::numeric_limits<double>::infinity();
    for (double& v : row) {
      v = std::log(std::max(v, kEpsLog)) / temperature;
      m = std::max(m, v);
    }
    double sum = 0.0;
    for (double& v : row) {
      v = std::exp(v - m);
      sum += v;
    }
    for (double& v : row) v /= sum;
  }
  return out;
}

double entropy(std::span<const double> row) {
  double h = 0.0;
  for (double p : row)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

std::size_t argmax(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

}  // namespace knfu::nn
