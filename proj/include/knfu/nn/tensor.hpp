#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "knfu/nn/aligned.hpp"

namespace knfu::nn {

/// Dense row-major tensor of doubles. The first dimension is the batch/row
/// axis; `row(i)` views one sample.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);
  Tensor(std::vector<std::size_t> shape, Buffer values);

  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values);

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  std::size_t rows() const noexcept { return shape_.empty() ? 0 : shape_[0]; }
  /// Number of values per row (product of all trailing dimensions).
  std::size_t row_size() const noexcept;

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }

  std::span<const double> row(std::size_t i) const;
  std::span<double> row(std::size_t i);

  double operator()(std::size_t r, std::size_t c) const {
    return values_[r * row_size() + c];
  }
  double& operator()(std::size_t r, std::size_t c) {
    return values_[r * row_size() + c];
  }

  bool all_finite() const noexcept;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  Buffer values_;
};

}  // namespace knfu::nn
