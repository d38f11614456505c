#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "knfu/data/dataset.hpp"

namespace knfu::data {

inline constexpr std::size_t kMaxResamples = 100;

struct PartitionPlan {
  double alpha = 0.0;
  std::size_t clients = 0;
  std::size_t shard_size = 0;
  /// clients x C rows drawn from Dir(alpha * 1_C).
  std::vector<std::vector<double>> proportions;
  std::uint64_t seed = 0;
};

struct Partition {
  PartitionPlan plan;
  /// Source indices per client, without replacement, disjoint across clients.
  std::vector<std::vector<std::size_t>> shards;
};

/// Splits `total` into integer counts proportional to `weights` that sum to
/// `total` exactly (largest remainder, ties to the lower index).
std::vector<std::size_t> largest_remainder(std::span<const double> weights,
                                           std::size_t total);

/// One Dirichlet row per client over classes; counts by largest remainder.
/// A row whose class demand exceeds what is left in the pool is redrawn up to
/// `max_resamples` times before PartitionError.
Partition dirichlet_partition(const LabeledSet& source, std::size_t clients,
                              double alpha, std::size_t shard_size,
                              std::uint64_t seed,
                              std::size_t max_resamples = kMaxResamples);

/// Same, restricted to the given pool of source indices.
Partition dirichlet_partition(std::span<const int> labels,
                              std::size_t num_classes,
                              std::span<const std::size_t> pool,
                              std::size_t clients, double alpha,
                              std::size_t shard_size, std::uint64_t seed,
                              std::size_t max_resamples = kMaxResamples);

/// Mean over clients of KL(client class histogram || pooled histogram).
double mean_kl_to_global(const Partition& partition,
                         std::span<const int> labels, std::size_t num_classes);

struct FederationOptions {
  std::size_t clients = 20;
  double alpha = 0.5;
  std::size_t shard_size = 100;
  /// 0 means "same as shard_size".
  std::size_t transfer_size = 0;
  std::size_t test_size = 200;
  std::uint64_t seed = 0;
  std::size_t max_resamples = kMaxResamples;
};

struct FederatedData {
  std::vector<LabeledSet> train;
  std::vector<LabeledSet> test;
  LabeledSet transfer;
  Partition partition;
  std::vector<std::size_t> transfer_indices;             // into source
  std::vector<std::vector<std::size_t>> test_indices;    // into test source
};

/// Reserves a class-balanced transfer set from `source`, partitions the rest
/// across clients, then draws each client's test shard from `test_source`
/// following that client's class proportions.
FederatedData build_federation(const LabeledSet& source,
                               const LabeledSet& test_source,
                               const FederationOptions& options);

/// Writes {transfer, clients: [{train, test}]} index lists as JSON.
void write_partition_manifest(const FederatedData& data,
                              const std::filesystem::path& path);

}  // namespace knfu::data
