#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "knfu/federation/federation.hpp"

namespace knfu::metrics {

using federation::RoundRecord;
using fusion::StrategyId;

/// Mean of per-client accuracies.
double alma(std::span<const double> accuracies);
/// Evaluates every client on its own test shard, then averages.
double alma(std::span<const federation::ClientState> clients);

/// Final ALMA of one (config, strategy, seed) run.
struct SeedRun {
  std::string fingerprint;
  std::string dataset;
  double alpha = 0.0;
  std::size_t shard_size = 0;
  StrategyId strategy = StrategyId::KnFu;
  std::uint64_t seed = 0;
  double final_alma = 0.0;
};

struct SeedAggregate {
  std::string fingerprint;
  std::string dataset;
  double alpha = 0.0;
  std::size_t shard_size = 0;
  StrategyId strategy = StrategyId::KnFu;
  std::vector<std::uint64_t> seeds;
  std::vector<double> values;
  double mean = 0.0;
  /// Sample (n - 1) standard deviation; 0 for a single seed.
  double stddev = 0.0;
  bool single_seed = false;
};

/// Groups runs by strategy (in first-seen order). Seeds are sorted so the
/// result does not depend on the order of `runs`. Throws InputError when the
/// runs come from different configurations.
std::vector<SeedAggregate> aggregate_seeds(std::span<const SeedRun> runs);

/// "88.1 ± 0.6"
std::string format_mean_std(double mean, double stddev, int decimals = 1);

std::string curve_filename(StrategyId strategy, std::uint64_t seed);

/// CSV `round,client_id,accuracy,alma,strategy,seed`, one line per client and
/// round, reals at 17 significant digits.
void write_curve(const std::filesystem::path& path, std::span<const RoundRecord> records);
/// Inverse of write_curve (wall time is not stored and reads back as 0).
std::vector<RoundRecord> read_curve(const std::filesystem::path& path);

/// JSON: {"rows": [{dataset, alpha, shard_size, strategy, mean, std, seeds,
/// values, single_seed, fingerprint}, ...]}
void write_summary(const std::filesystem::path& path, std::span<const SeedAggregate> rows);
std::vector<SeedAggregate> read_summary(const std::filesystem::path& path);

/// Text table: one line per alpha, one column block per shard size
/// with KnFu, FedMD, Local, Selective-FD cells in percent.
std::string render_table(std::span<const SeedAggregate> rows);

}  // namespace knfu::metrics
