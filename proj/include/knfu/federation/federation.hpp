#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "knfu/data/partition.hpp"
#include "knfu/fusion/fusion.hpp"
#include "knfu/nn/model.hpp"
#include "knfu/nn/training.hpp"

namespace knfu::federation {

using fusion::StrategyId;

/// How the Local baseline spends its fine-tune budget.
enum class LocalMode {
  /// Fine-tune on the transfer set with its labels only (lambda = 0).
  Transfer,
  /// Spend the fine-tune epochs on the client's own shard instead.
  LocalOnly,
};

/// {1000: 128, 500: 64, 200: 32, 100: 16, 50: 8}; other sizes take the
/// nearest key, the smaller one on ties.
std::size_t batch_size_for(std::size_t shard_size);

struct ClientState {
  std::size_t id = 0;
  nn::Model model;
  data::LabeledSet train;
  data::LabeledSet test;
  nn::SgdState sgd;
  /// Test accuracy after each completed round.
  std::vector<double> history;
  /// Training samples seen during the most recent round.
  std::size_t round_samples = 0;
};

/// Seeds are derived from (seed, client id), so every strategy run with the
/// same seed starts from the same models.
std::vector<ClientState> make_clients(const data::FederatedData& data,
                                      const nn::ModelSpec& spec,
                                      std::uint64_t seed, double learning_rate,
                                      std::size_t batch_size);

/// Where one phase of one round sits; each client draws its shuffling stream
/// from (seed, client id, round, phase).
struct PhaseContext {
  std::uint64_t seed = 0;
  std::size_t round = 0;
  std::size_t threads = 1;
};

/// E epochs of CE-only SGD on each client's own shard. Returns per-client
/// totals over the epochs.
std::vector<nn::EpochStats> local_training_phase(std::span<ClientState> clients,
                                                 std::size_t epochs,
                                                 const PhaseContext& ctx);

/// Soft labels of every client on the transfer inputs, temperature 1.
std::vector<fusion::SoftLabelMatrix> extraction_phase(
    std::span<const ClientState> clients, const nn::Tensor& transfer_inputs,
    std::size_t threads = 1);

/// CE on transfer labels plus lambda^2 * KL towards each client's fused
/// knowledge. Without fused knowledge the KL term is dropped.
std::vector<nn::EpochStats> finetune_phase(std::span<ClientState> clients,
                                           const fusion::FusedKnowledge* fused,
                                           const data::LabeledSet& transfer,
                                           double lambda, std::size_t epochs,
                                           const PhaseContext& ctx);

/// Share of test samples whose argmax matches the label.
double accuracy(const nn::Model& model, const data::LabeledSet& test);

struct RoundRecord {
  std::size_t round = 0;
  std::vector<double> accuracy;
  double alma = 0.0;
  double wall_seconds = 0.0;
  StrategyId strategy = StrategyId::KnFu;
  std::uint64_t seed = 0;
};

struct Counters {
  std::size_t weight_matrices = 0;
  /// Soft-label matrices handed to the fusion center.
  std::size_t soft_labels_shared = 0;
  std::size_t fallback_samples = 0;
  std::size_t clipped_components = 0;
};

struct RunOptions {
  std::size_t rounds = 50;
  std::size_t local_epochs = 1;
  std::size_t finetune_epochs = 1;
  double lambda = 1.0;
  double learning_rate = 0.01;
  /// 0 picks batch_size_for(shard size).
  std::size_t batch_size = 0;
  fusion::FusionParams fusion;
  LocalMode local_mode = LocalMode::Transfer;
  std::size_t threads = 1;
  /// Per-round EPD / weight dumps land here when set.
  std::optional<std::filesystem::path> dump_dir;
  std::function<void(const RoundRecord&)> on_round;
};

struct RunResult {
  std::vector<RoundRecord> records;
  std::vector<ClientState> clients;
  Counters counters;
};

/// Algorithm 1 for one strategy and seed.
RunResult run_federation(const data::FederatedData& data,
                         const nn::ModelSpec& spec, StrategyId strategy,
                         std::uint64_t seed, const RunOptions& options);

}  // namespace knfu::federation
