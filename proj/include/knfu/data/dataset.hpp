#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <variant>
#include <vector>

#include "knfu/nn/model.hpp"
#include "knfu/nn/tensor.hpp"

namespace knfu::data {

/// Inputs (n x C x H x W) with one class label per sample.
struct LabeledSet {
  nn::Tensor inputs;
  std::vector<int> labels;
  std::size_t num_classes = 0;

  static LabeledSet make(nn::Shape3 sample_shape, std::vector<double> values,
                         std::vector<int> labels, std::size_t num_classes);

  std::size_t size() const noexcept { return labels.size(); }
  nn::Shape3 sample_shape() const;
  LabeledSet subset(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> class_histogram() const;
  /// Throws InputError when counts disagree or a label is out of range.
  void validate() const;
};

struct IdxImages {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> pixels;  // count x rows x cols, scaled to [0, 1]
  std::size_t count() const { return rows * cols != 0 ? pixels.size() / (rows * cols) : 0; }
};

struct IdxLabels {
  std::vector<int> labels;
};

using IdxData = std::variant<IdxImages, IdxLabels>;

/// Decodes an IDX image (magic 0x00000803) or label (0x00000801) file.
IdxData parse_idx(std::span<const std::uint8_t> bytes);

/// Decodes concatenated CIFAR-10 binary records (1 label + 3072 pixels).
LabeledSet parse_cifar10(std::span<const std::uint8_t> bytes);

/// Reads a whole file, transparently inflating gzip content.
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);

LabeledSet load_mnist(const std::filesystem::path& images,
                      const std::filesystem::path& labels);
LabeledSet load_cifar10(std::span<const std::filesystem::path> batches);

/// Gaussian blobs, unit variance, one mean per class. Each mean sits
/// `separation` standard deviations from every pairwise decision boundary.
/// Means depend only on (num_classes, input_dim); samples on `seed`.
LabeledSet synth_dataset(std::size_t num_classes, std::size_t per_class,
                         std::size_t input_dim, std::uint64_t seed,
                         double separation = 3.0);

}  // namespace knfu::data
