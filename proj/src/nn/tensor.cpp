#include "knfu/nn/tensor.hpp"

#include <cmath>
#include <functional>
#include <numeric>

#include "knfu/errors.hpp"

namespace knfu::nn {

namespace {
std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}
}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), values_(product(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(values.begin(), values.end()) {
  if (values_.size() != product(shape_))
    throw InputError("tensor value count " + std::to_string(values_.size()) +
                     " does not match shape product " +
                     std::to_string(product(shape_)));
}

Tensor::Tensor(std::vector<std::size_t> shape, Buffer values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (values_.size() != product(shape_))
    throw InputError("tensor value count " + std::to_string(values_.size()) +
                     " does not match shape product " +
                     std::to_string(product(shape_)));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

std::size_t Tensor::row_size() const noexcept {
  if (shape_.empty()) return 0;
  std::size_t n = 1;
  for (std::size_t i = 1; i < shape_.size(); ++i) n *= shape_[i];
  return n;
}

std::span<const double> Tensor::row(std::size_t i) const {
  const auto n = row_size();
  return std::span<const double>(values_).subspan(i * n, n);
}

std::span<double> Tensor::row(std::size_t i) {
  const auto n = row_size();
  return std::span<double>(values_).subspan(i * n, n);
}

bool Tensor::all_finite() const noexcept {
  for (double v : values_)
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace knfu::nn
