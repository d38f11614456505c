#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "knfu/nn/tensor.hpp"

namespace knfu::testing {

inline nn::Tensor random_matrix(std::size_t rows, std::size_t cols,
                                std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = d(rng);
  return nn::Tensor::matrix(rows, cols, std::move(v));
}

/// Rows drawn uniformly-ish from the simplex (normalized exponentials).
inline nn::Tensor random_simplex(std::size_t rows, std::size_t cols,
                                 std::mt19937_64& rng) {
  std::exponential_distribution<double> d(1.0);
  std::vector<double> v(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += v[r * cols + c] = d(rng);
    for (std::size_t c = 0; c < cols; ++c) v[r * cols + c] /= s;
  }
  return nn::Tensor::matrix(rows, cols, std::move(v));
}

inline std::vector<int> random_labels(std::size_t n, int classes,
                                      std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, classes - 1);
  std::vector<int> y(n);
  for (auto& v : y) v = d(rng);
  return y;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace knfu::testing
