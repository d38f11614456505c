#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "knfu/nn/tensor.hpp"

namespace knfu::fusion {

inline constexpr double kEpsDistance = 1e-6;
inline constexpr double kDefaultBeta = 10.0;

using Matrix = std::vector<std::vector<double>>;

/// One client's predictions on the transfer set, K_t x C.
struct SoftLabelMatrix {
  std::size_t client = 0;
  nn::Tensor values;
};

struct Epd {
  std::size_t client = 0;
  std::vector<double> distribution;
};

struct WeightMatrix {
  double beta = kDefaultBeta;
  Matrix distances;
  Matrix raw;
  Matrix normalized;

  std::size_t size() const { return normalized.size(); }
};

struct FusedKnowledge {
  /// Per client, aligned row-wise with the transfer set.
  std::vector<nn::Tensor> aggregated;
  /// Filled by knfu_fuse only.
  std::vector<Epd> epds;
  std::optional<WeightMatrix> weights;
  /// Filled by selective_fd_fuse: 1 where no row survived the selectors.
  std::vector<std::uint8_t> fallback;
};

/// Column means of F.
Epd compute_epd(const SoftLabelMatrix& f);

/// d[n][m] = KL(p_n || p_m) in nats, probabilities clamped at kEpsLog.
Matrix pairwise_kl(std::span<const Epd> epds);

/// Inverse squared distance weights with a beta-scaled self weight, then row
/// normalization. A single client gets [[1]].
WeightMatrix weight_matrix(const Matrix& distances, double beta,
                           double eps_d = kEpsDistance);

/// Divides each row by its sum.
Matrix normalize_rows(const Matrix& raw);

FusedKnowledge knfu_fuse(std::span<const SoftLabelMatrix> fs,
                         double beta = kDefaultBeta,
                         double eps_d = kEpsDistance);

FusedKnowledge fedmd_fuse(std::span<const SoftLabelMatrix> fs);

/// ln(C) / 2.
double default_entropy_threshold(std::size_t num_classes);

/// Client rows whose argmax matches the label and whose entropy is at most
/// tau are averaged; samples with no surviving row use the plain mean.
FusedKnowledge selective_fd_fuse(std::span<const SoftLabelMatrix> fs,
                                 std::span<const int> transfer_labels,
                                 std::optional<double> tau = std::nullopt);

/// Number of weight matrices built so far in this process.
std::uint64_t weight_matrix_calls();

enum class StrategyId { KnFu, FedMD, SelectiveFD, Local };

std::string_view to_string(StrategyId id);
/// Accepts knfu, fedmd, selective_fd (or selectivefd), local; case-insensitive.
StrategyId parse_strategy(std::string_view name);

struct FusionParams {
  double beta = kDefaultBeta;
  double eps_d = kEpsDistance;
  std::optional<double> tau;
};

class FusionStrategy {
 public:
  virtual ~FusionStrategy() = default;
  virtual StrategyId id() const = 0;
  virtual FusedKnowledge fuse(std::span<const SoftLabelMatrix> fs,
                              std::span<const int> transfer_labels) const = 0;
};

/// Local has no fusion step, so asking for it throws InputError.
std::unique_ptr<FusionStrategy> make_strategy(StrategyId id,
                                              const FusionParams& params = {});

/// EPDs and normalized weights of one round as a JSON document.
std::string round_dump(const FusedKnowledge& fused, std::size_t round);

}  // namespace knfu::fusion
