#pragma once

// Internal layer plan shared by forward, backward and training.

#include <cstddef>
#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "knfu/nn/aligned.hpp"
#include "knfu/nn/model.hpp"

namespace knfu::nn::detail {

struct ConvPlan {
  Shape3 in;
  Shape3 conv_out;  // before pooling
  Shape3 out;       // after pooling
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 0;
  Activation activation = Activation::Relu;
  bool pool = true;
  std::size_t weight_offset = 0;
  std::size_t bias_offset = 0;

  std::size_t patch() const { return in.channels * kernel * kernel; }
  std::size_t positions() const { return conv_out.height * conv_out.width; }
};

struct DensePlan {
  std::size_t in = 0;
  std::size_t out = 0;
  Activation activation = Activation::Relu;
  std::size_t weight_offset = 0;
  std::size_t bias_offset = 0;
};

using LayerPlan = std::variant<ConvPlan, DensePlan>;

struct Plan {
  std::vector<LayerPlan> layers;
  std::size_t input_size = 0;
  std::size_t num_classes = 0;
  std::size_t parameter_count = 0;
};

Plan compile(const ModelSpec& spec);

/// Per-layer values kept by a training forward pass.
struct LayerCache {
  Buffer input;
  Buffer columns;    // conv only: batch x patch x positions
  Buffer activated;  // post-activation, pre-pool (conv: channel x batch*positions)
  std::vector<std::int32_t> pool_index;
};

struct Trace {
  std::size_t batch = 0;
  std::vector<LayerCache> layers;
};

/// Computes logits (batch x C). Fills `trace` when non-null.
Buffer run_forward(const Plan& plan, std::span<const double> params,
                                std::span<const double> input,
                                std::size_t batch, Trace* trace);

/// Accumulates dLoss/dparams into `grad` given dLoss/dlogits.
void run_backward(const Plan& plan, std::span<const double> params,
                  const Trace& trace, std::span<const double> dlogits,
                  std::span<double> grad);

}  // namespace knfu::nn::detail
