#include "knfu/data/partition.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "json.hpp"
#include "knfu/errors.hpp"
#include "knfu/rng.hpp"

namespace knfu::data {

namespace {

constexpr std::uint64_t kPartitionStream = 0x9a27;
constexpr std::uint64_t kTestStream = 0x7e57;

std::vector<double> draw_dirichlet(double alpha, std::size_t classes, Rng& rng) {
  std::gamma_distribution<double> gamma(alpha, 1.0);
  std::vector<double> p(classes);
  for (;;) {
    double sum = 0.0;
    for (auto& v : p) sum += v = gamma(rng);
    if (sum > 0.0 && std::isfinite(sum)) {
      for (auto& v : p) v /= sum;
      return p;
    }
  }
}

/// Shuffled per-class index lists drawn from `pool`.
std::vector<std::vector<std::size_t>> class_pools(std::span<const int> labels,
                                                  std::size_t classes,
                                                  std::span<const std::size_t> pool,
                                                  Rng& rng) {
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t idx : pool) {
    const int y = labels[idx];
    if (y < 0 || static_cast<std::size_t>(y) >= classes)
      throw InputError("label out of range in partition source");
    by_class[static_cast<std::size_t>(y)].push_back(idx);
  }
  for (auto& v : by_class) std::shuffle(v.begin(), v.end(), rng);
  return by_class;
}

double kl_histogram(std::span<const double> p, std::span<const double> q) {
  double d = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j)
    if (p[j] > 0.0) d += p[j] * std::log(p[j] / std::max(q[j], 1e-12));
  return std::max(d, 0.0);
}

}  // namespace

std::vector<std::size_t> largest_remainder(std::span<const double> weights,
                                           std::size_t total) {
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (weights.empty() || !(sum > 0.0))
    throw InputError("largest_remainder needs positive total weight");
  std::vector<std::size_t> counts(weights.size());
  std::vector<double> frac(weights.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = weights[i] / sum * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    frac[i] = exact - std::floor(exact);
    assigned += counts[i];
  }
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t k = 0; assigned < total; ++k, ++assigned)
    ++counts[order[k % order.size()]];
  return counts;
}

Partition dirichlet_partition(std::span<const int> labels, std::size_t num_classes,
                              std::span<const std::size_t> pool,
                              std::size_t clients, double alpha,
                              std::size_t shard_size, std::uint64_t seed,
                              std::size_t max_resamples) {
  if (!(alpha > 0.0)) throw InputError("alpha must be positive");
  if (clients == 0) throw InputError("client count must be positive");
  if (num_classes == 0) throw InputError("class count must be positive");

  Rng rng = make_rng(seed, {kPartitionStream});
  auto by_class = class_pools(labels, num_classes, pool, rng);
  std::vector<std::size_t> used(num_classes, 0);

  Partition out;
  out.plan = {alpha, clients, shard_size, {}, seed};
  for (std::size_t n = 0; n < clients; ++n) {
    std::vector<double> p;
    std::vector<std::size_t> counts;
    for (std::size_t attempt = 0;; ++attempt) {
      p = draw_dirichlet(alpha, num_classes, rng);
      counts = largest_remainder(p, shard_size);
      bool feasible = true;
      for (std::size_t c = 0; c < num_classes; ++c)
        feasible &= used[c] + counts[c] <= by_class[c].size();
      if (feasible) break;
      if (attempt >= max_resamples)
        throw PartitionError("client " + std::to_string(n) +
                             ": class pool exhausted after " +
                             std::to_string(max_resamples) + " resamples");
    }
    std::vector<std::size_t> shard;
    shard.reserve(shard_size);
    for (std::size_t c = 0; c < num_classes; ++c)
      for (std::size_t k = 0; k < counts[c]; ++k)
        shard.push_back(by_class[c][used[c]++]);
    std::sort(shard.begin(), shard.end());
    out.plan.proportions.push_back(std::move(p));
    out.shards.push_back(std::move(shard));
  }
  return out;
}

Partition dirichlet_partition(const LabeledSet& source, std::size_t clients,
                              double alpha, std::size_t shard_size,
                              std::uint64_t seed, std::size_t max_resamples) {
  std::vector<std::size_t> pool(source.size());
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  return dirichlet_partition(source.labels, source.num_classes, pool, clients,
                             alpha, shard_size, seed, max_resamples);
}

double mean_kl_to_global(const Partition& partition, std::span<const int> labels,
                         std::size_t num_classes) {
  if (partition.shards.empty()) return 0.0;
  std::vector<double> global(num_classes, 0.0);
  std::vector<std::vector<double>> local;
  for (const auto& shard : partition.shards) {
    std::vector<double> h(num_classes, 0.0);
    for (std::size_t idx : shard) h[static_cast<std::size_t>(labels[idx])] += 1.0;
    for (std::size_t c = 0; c < num_classes; ++c) global[c] += h[c];
    const double n = std::max<double>(1.0, static_cast<double>(shard.size()));
    for (auto& v : h) v /= n;
    local.push_back(std::move(h));
  }
  const double total = std::accumulate(global.begin(), global.end(), 0.0);
  for (auto& v : global) v /= std::max(total, 1.0);
  double sum = 0.0;
  for (const auto& h : local) sum += kl_histogram(h, global);
  return sum / static_cast<double>(local.size());
}

FederatedData build_federation(const LabeledSet& source,
                               const LabeledSet& test_source,
                               const FederationOptions& opt) {
  if (source.num_classes != test_source.num_classes)
    throw InputError("train and test sources disagree on the class count");
  const std::size_t C = source.num_classes;
  const std::size_t transfer_size = opt.transfer_size ? opt.transfer_size : opt.shard_size;

  // Transfer set: class-balanced, taken first so it never overlaps a shard.
  Rng rng = make_rng(opt.seed, {kPartitionStream, 1});
  std::vector<std::size_t> all(source.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  auto by_class = class_pools(source.labels, C, all, rng);
  const std::vector<double> uniform(C, 1.0);
  const auto transfer_counts = largest_remainder(uniform, transfer_size);

  FederatedData out;
  std::vector<std::size_t> train_pool;
  for (std::size_t c = 0; c < C; ++c) {
    if (transfer_counts[c] > by_class[c].size())
      throw PartitionError("transfer pool exhausted: class " + std::to_string(c) +
                           " needs " + std::to_string(transfer_counts[c]) +
                           ", has " + std::to_string(by_class[c].size()));
    out.transfer_indices.insert(out.transfer_indices.end(), by_class[c].begin(),
                                by_class[c].begin() +
                                    static_cast<std::ptrdiff_t>(transfer_counts[c]));
    train_pool.insert(train_pool.end(),
                      by_class[c].begin() + static_cast<std::ptrdiff_t>(transfer_counts[c]),
                      by_class[c].end());
  }
  std::sort(out.transfer_indices.begin(), out.transfer_indices.end());
  std::sort(train_pool.begin(), train_pool.end());

  try {
    out.partition = dirichlet_partition(source.labels, C, train_pool, opt.clients,
                                        opt.alpha, opt.shard_size, opt.seed,
                                        opt.max_resamples);
  } catch (const PartitionError& e) {
    throw PartitionError(std::string("train pool: ") + e.what());
  }

  // Test shards follow each client's drawn proportions; drawn without
  // replacement within a client, independently across clients.
  std::vector<std::vector<std::size_t>> test_by_class(C);
  for (std::size_t i = 0; i < test_source.size(); ++i)
    test_by_class[static_cast<std::size_t>(test_source.labels[i])].push_back(i);

  out.transfer = source.subset(out.transfer_indices);
  for (std::size_t n = 0; n < opt.clients; ++n) {
    out.train.push_back(source.subset(out.partition.shards[n]));
    Rng trng = make_rng(opt.seed, {kTestStream, n});
    const auto counts = largest_remainder(out.partition.plan.proportions[n], opt.test_size);
    std::vector<std::size_t> idx;
    for (std::size_t c = 0; c < C; ++c) {
      if (counts[c] > test_by_class[c].size())
        throw PartitionError("test pool exhausted: client " + std::to_string(n) +
                             " needs " + std::to_string(counts[c]) +
                             " samples of class " + std::to_string(c) + ", has " +
                             std::to_string(test_by_class[c].size()));
      std::vector<std::size_t> picked;
      std::sample(test_by_class[c].begin(), test_by_class[c].end(),
                  std::back_inserter(picked), counts[c], trng);
      idx.insert(idx.end(), picked.begin(), picked.end());
    }
    std::sort(idx.begin(), idx.end());
    out.test.push_back(test_source.subset(idx));
    out.test_indices.push_back(std::move(idx));
  }
  return out;
}

void write_partition_manifest(const FederatedData& data,
                              const std::filesystem::path& path) {
  nlohmann::json j;
  j["alpha"] = data.partition.plan.alpha;
  j["seed"] = data.partition.plan.seed;
  j["shard_size"] = data.partition.plan.shard_size;
  j["transfer"] = data.transfer_indices;
  j["clients"] = nlohmann::json::array();
  for (std::size_t n = 0; n < data.partition.shards.size(); ++n)
    j["clients"].push_back({{"client", n},
                            {"proportions", data.partition.plan.proportions[n]},
                            {"train", data.partition.shards[n]},
                            {"test", data.test_indices[n]}});
  std::ofstream f(path);
  if (!f) throw IoError(path.string(), "cannot open for writing");
  f << j.dump(1) << '\n';
  if (!f) throw IoError(path.string(), "write failed");
}

}  // namespace knfu::data
