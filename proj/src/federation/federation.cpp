#include "knfu/federation/federation.hpp"

#include <array>
#include <chrono>
#include <fstream>

#include "knfu/errors.hpp"
#include "knfu/nn/losses.hpp"
#include "knfu/parallel.hpp"
#include "knfu/rng.hpp"

namespace knfu::federation {

namespace {

constexpr std::uint64_t kTagInit = 0x1417;
constexpr std::uint64_t kPhaseLocal = 1;
constexpr std::uint64_t kPhaseFinetune = 2;
constexpr std::uint64_t kPhaseLocalOnly = 3;

Rng phase_rng(const PhaseContext& ctx, std::size_t client, std::uint64_t phase) {
  return make_rng(ctx.seed, {client, ctx.round, phase});
}

nn::EpochStats train(ClientState& c, const data::LabeledSet& set,
                     const nn::Tensor* targets, double lambda, std::size_t epochs,
                     Rng& rng) {
  nn::EpochStats total;
  double loss = 0.0;
  for (std::size_t e = 0; e < epochs; ++e) {
    const auto s = nn::train_epoch(c.model, set.inputs, set.labels, targets, lambda, c.sgd, rng);
    loss += s.mean_loss;
    total.steps += s.steps;
    total.samples += s.samples;
  }
  total.mean_loss = epochs ? loss / static_cast<double>(epochs) : 0.0;
  c.round_samples += total.samples;
  return total;
}

template <class Fn>
auto in_phase(std::size_t round, const char* phase, Fn&& fn) {
  try {
    return fn();
  } catch (const PhaseError&) {
    throw;
  } catch (const std::exception& e) {
    throw PhaseError(round, phase, e.what());
  }
}

}  // namespace

std::size_t batch_size_for(std::size_t shard_size) {
  static constexpr std::array<std::pair<std::size_t, std::size_t>, 5> kSchedule{
      {{50, 8}, {100, 16}, {200, 32}, {500, 64}, {1000, 128}}};
  std::size_t best = kSchedule[0].second, gap = SIZE_MAX;
  for (const auto& [size, batch] : kSchedule) {
    const std::size_t d = size > shard_size ? size - shard_size : shard_size - size;
    if (d < gap) {
      gap = d;
      best = batch;
    }
  }
  return best;
}

std::vector<ClientState> make_clients(const data::FederatedData& data,
                                      const nn::ModelSpec& spec, std::uint64_t seed,
                                      double learning_rate, std::size_t batch_size) {
  if (data.train.size() != data.test.size())
    throw InputError("train and test shard counts differ");
  std::vector<ClientState> clients;
  for (std::size_t n = 0; n < data.train.size(); ++n) {
    ClientState c{n, nn::Model(spec, derive_seed(seed, {kTagInit, n})), data.train[n],
                  data.test[n], {}, {}, 0};
    c.sgd.learning_rate = learning_rate;
    c.sgd.batch_size = batch_size;
    clients.push_back(std::move(c));
  }
  return clients;
}

std::vector<nn::EpochStats> local_training_phase(std::span<ClientState> clients,
                                                 std::size_t epochs,
                                                 const PhaseContext& ctx) {
  if (epochs == 0) throw ConfigError("local_epochs", "must be at least 1");
  for (const auto& c : clients)
    if (c.train.size() == 0)
      throw ConfigError("shard_size", "client " + std::to_string(c.id) + " has an empty training shard");
  std::vector<nn::EpochStats> stats(clients.size());
  parallel_for(clients.size(), ctx.threads, [&](std::size_t i) {
    auto& c = clients[i];
    Rng rng = phase_rng(ctx, c.id, kPhaseLocal);
    stats[i] = train(c, c.train, nullptr, 0.0, epochs, rng);
  });
  return stats;
}

std::vector<fusion::SoftLabelMatrix> extraction_phase(std::span<const ClientState> clients,
                                                      const nn::Tensor& transfer_inputs,
                                                      std::size_t threads) {
  std::vector<fusion::SoftLabelMatrix> out(clients.size());
  parallel_for(clients.size(), threads, [&](std::size_t i) {
    out[i] = {clients[i].id, nn::forward(clients[i].model, transfer_inputs)};
  });
  return out;
}

std::vector<nn::EpochStats> finetune_phase(std::span<ClientState> clients,
                                           const fusion::FusedKnowledge* fused,
                                           const data::LabeledSet& transfer,
                                           double lambda, std::size_t epochs,
                                           const PhaseContext& ctx) {
  if (lambda < 0.0) throw ConfigError("lambda", "must be nonnegative");
  if (fused) {
    if (fused->aggregated.size() != clients.size())
      throw InputError("fused knowledge has " + std::to_string(fused->aggregated.size()) +
                       " clients, expected " + std::to_string(clients.size()));
    for (const auto& t : fused->aggregated)
      if (t.rows() != transfer.size() || t.row_size() != transfer.num_classes)
        throw InputError("fused knowledge rows do not align with the transfer set");
  }
  const double lam = fused ? lambda : 0.0;
  std::vector<nn::EpochStats> stats(clients.size());
  parallel_for(clients.size(), ctx.threads, [&](std::size_t i) {
    auto& c = clients[i];
    Rng rng = phase_rng(ctx, c.id, kPhaseFinetune);
    const nn::Tensor* target = lam > 0.0 ? &fused->aggregated[i] : nullptr;
    stats[i] = train(c, transfer, target, lam, epochs, rng);
  });
  return stats;
}

double accuracy(const nn::Model& model, const data::LabeledSet& test) {
  if (test.size() == 0) throw InputError("accuracy needs a nonempty test shard");
  const auto z = nn::logits(model, test.inputs);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < test.size(); ++i)
    hit += nn::argmax(z.row(i)) == static_cast<std::size_t>(test.labels[i]);
  return static_cast<double>(hit) / static_cast<double>(test.size());
}

RunResult run_federation(const data::FederatedData& data, const nn::ModelSpec& spec,
                         StrategyId strategy, std::uint64_t seed, const RunOptions& opt) {
  if (data.train.empty()) throw ConfigError("clients", "need at least one client");
  const std::size_t batch =
      opt.batch_size ? opt.batch_size : batch_size_for(data.train.front().size());
  RunResult result;
  result.clients = make_clients(data, spec, seed, opt.learning_rate, batch);
  auto& clients = result.clients;
  std::unique_ptr<fusion::FusionStrategy> fuser;
  if (strategy != StrategyId::Local) fuser = fusion::make_strategy(strategy, opt.fusion);
  if (opt.dump_dir) std::filesystem::create_directories(*opt.dump_dir);

  for (std::size_t r = 1; r <= opt.rounds; ++r) {
    const auto start = std::chrono::steady_clock::now();
    const PhaseContext ctx{seed, r, opt.threads};
    for (auto& c : clients) c.round_samples = 0;

    in_phase(r, "local training", [&] { return local_training_phase(clients, opt.local_epochs, ctx); });

    if (fuser) {
      const auto fs = in_phase(r, "extraction", [&] {
        return extraction_phase(clients, data.transfer.inputs, opt.threads);
      });
      const auto fused = in_phase(r, "fusion", [&] { return fuser->fuse(fs, data.transfer.labels); });
      result.counters.soft_labels_shared += fs.size();
      if (fused.weights) ++result.counters.weight_matrices;
      for (auto f : fused.fallback) result.counters.fallback_samples += f;
      if (opt.dump_dir) {
        const auto path = *opt.dump_dir / ("fusion_" + std::string(fusion::to_string(strategy)) +
                                           "_seed" + std::to_string(seed) + "_round" +
                                           std::to_string(r) + ".json");
        std::ofstream out(path);
        if (!(out << fusion::round_dump(fused, r)))
          throw IoError(path.string(), "cannot write fusion dump");
      }
      in_phase(r, "fine-tune", [&] {
        return finetune_phase(clients, &fused, data.transfer, opt.lambda, opt.finetune_epochs, ctx);
      });
    } else if (opt.local_mode == LocalMode::Transfer) {
      in_phase(r, "fine-tune", [&] {
        return finetune_phase(clients, nullptr, data.transfer, 0.0, opt.finetune_epochs, ctx);
      });
    } else {
      in_phase(r, "fine-tune", [&] {
        std::vector<nn::EpochStats> stats(clients.size());
        parallel_for(clients.size(), opt.threads, [&](std::size_t i) {
          Rng rng = phase_rng(ctx, clients[i].id, kPhaseLocalOnly);
          stats[i] = train(clients[i], clients[i].train, nullptr, 0.0, opt.finetune_epochs, rng);
        });
        return stats;
      });
    }

    RoundRecord rec{r, std::vector<double>(clients.size()), 0.0, 0.0, strategy, seed};
    in_phase(r, "evaluation", [&] {
      parallel_for(clients.size(), opt.threads,
                   [&](std::size_t i) { rec.accuracy[i] = accuracy(clients[i].model, clients[i].test); });
      return 0;
    });
    double sum = 0.0;
    for (std::size_t i = 0; i < clients.size(); ++i) {
      sum += rec.accuracy[i];
      clients[i].history.push_back(rec.accuracy[i]);
    }
    rec.alma = sum / static_cast<double>(clients.size());
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (opt.on_round) opt.on_round(rec);
    result.records.push_back(std::move(rec));
  }
  for (const auto& c : clients) result.counters.clipped_components += c.sgd.clipped;
  return result;
}

}  // namespace knfu::federation
