#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "knfu/nn/tensor.hpp"

namespace knfu::nn {

enum class Arch { M1, M2, MlpSmall, Custom };
enum class Activation { None, Relu, Tanh };
enum class Padding { Valid, Same };

struct Shape3 {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t size() const noexcept { return channels * height * width; }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

/// Convolution unit: conv -> activation -> optional 2x2 max-pool.
struct ConvDesc {
  std::size_t out_channels = 1;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  Padding padding = Padding::Valid;
  Activation activation = Activation::Relu;
  bool pool = true;
};

struct DenseDesc {
  std::size_t width = 1;
  Activation activation = Activation::Relu;
};

using LayerDesc = std::variant<ConvDesc, DenseDesc>;

/// Network topology. The last layer must be a dense layer of width
/// `num_classes` with no activation (it produces logits).
struct ModelSpec {
  Arch arch = Arch::Custom;
  Shape3 input;
  std::vector<LayerDesc> layers;
  std::size_t num_classes = 0;

  /// MNIST CNN: CU(32) CU(64) FC(64) FC(32) FC(10), valid padding.
  static ModelSpec m1();
  /// CIFAR-10 CNN: CU(16) CU(16) CU(32) CU(32) FC(128) FC(10), same padding.
  static ModelSpec m2();
  /// input -> hidden (ReLU) -> classes
  static ModelSpec mlp_small(std::size_t input_dim, std::size_t hidden,
                             std::size_t num_classes);

  /// Stable textual identifier, e.g. "mlp-small:4|fc3r|fc2".
  std::string id() const;
  std::size_t parameter_count() const;
  /// Throws InputError for inconsistent topologies.
  void validate() const;
};

/// Parameters plus the topology they belong to.
class Model {
 public:
  /// Uniform init in [-s, s], s = 1/sqrt(fan_in), for weights and biases.
  Model(ModelSpec spec, std::uint64_t seed);
  /// Wraps an explicit parameter vector (size must match the spec).
  Model(ModelSpec spec, std::vector<double> parameters);

  const ModelSpec& spec() const noexcept { return spec_; }
  std::span<const double> parameters() const noexcept { return params_; }
  std::span<double> parameters() noexcept { return params_; }

  friend bool operator==(const Model& a, const Model& b) {
    return a.spec_.id() == b.spec_.id() && a.params_ == b.params_;
  }

 private:
  ModelSpec spec_;
  Buffer params_;
};

/// Raw pre-softmax outputs, batch x C.
Tensor logits(const Model& model, const Tensor& batch);

/// softmax(logits / temperature), batch x C rows on the simplex.
Tensor forward(const Model& model, const Tensor& batch,
               double temperature = 1.0);

/// Row-wise softmax of a logit matrix at the given temperature.
Tensor softmax(const Tensor& logits, double temperature = 1.0);

}  // namespace knfu::nn
