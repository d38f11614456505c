#include "knfu/fusion/fusion.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>

#include "json.hpp"
#include "knfu/errors.hpp"
#include "knfu/nn/losses.hpp"

namespace knfu::fusion {

namespace {

std::atomic<std::uint64_t> g_weight_calls{0};

void check_inputs(std::span<const SoftLabelMatrix> fs) {
  if (fs.empty()) throw InputError("fusion needs at least one client");
  const auto& shape = fs.front().values.shape();
  if (shape.size() != 2 || shape[0] == 0 || shape[1] == 0)
    throw InputError("soft-label matrices must be nonempty K_t x C");
  for (const auto& f : fs)
    if (f.values.shape() != shape)
      throw InputError("client " + std::to_string(f.client) +
                       ": soft-label matrix shape differs from client " +
                       std::to_string(fs.front().client));
}

double kl(std::span<const double> p, std::span<const double> q) {
  double d = 0.0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    if (p[c] <= 0.0) continue;
    d += p[c] * std::log(std::max(p[c], nn::kEpsLog) / std::max(q[c], nn::kEpsLog));
  }
  return std::max(d, 0.0);
}

nn::Tensor uniform_mean(std::span<const SoftLabelMatrix> fs) {
  nn::Tensor out(fs.front().values.shape());
  auto o = out.values();
  for (const auto& f : fs) {
    const auto v = f.values.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += v[i];
  }
  const double n = static_cast<double>(fs.size());
  for (double& x : o) x /= n;
  return out;
}

}  // namespace

Epd compute_epd(const SoftLabelMatrix& f) {
  if (f.values.shape().size() != 2 || f.values.rows() == 0)
    throw InputError("compute_epd: empty soft-label matrix");
  const std::size_t K = f.values.rows(), C = f.values.row_size();
  Epd e{f.client, std::vector<double>(C, 0.0)};
  for (std::size_t i = 0; i < K; ++i) {
    const auto row = f.values.row(i);
    for (std::size_t c = 0; c < C; ++c) e.distribution[c] += row[c];
  }
  for (double& v : e.distribution) v /= static_cast<double>(K);
  return e;
}

Matrix pairwise_kl(std::span<const Epd> epds) {
  const std::size_t N = epds.size();
  for (const auto& e : epds)
    if (e.distribution.size() != epds.front().distribution.size())
      throw InputError("pairwise_kl: EPDs have different class counts");
  Matrix d(N, std::vector<double>(N, 0.0));
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t m = 0; m < N; ++m)
      if (m != n) d[n][m] = kl(epds[n].distribution, epds[m].distribution);
  return d;
}

Matrix normalize_rows(const Matrix& raw) {
  Matrix out = raw;
  for (auto& row : out) {
    double sum = 0.0;
    for (double v : row) sum += v;
    for (double& v : row) v /= sum;
  }
  return out;
}

WeightMatrix weight_matrix(const Matrix& distances, double beta, double eps_d) {
  if (!(beta > 0.0)) throw InputError("beta must be positive");
  if (!(eps_d > 0.0)) throw InputError("distance floor must be positive");
  const std::size_t N = distances.size();
  for (const auto& row : distances)
    if (row.size() != N) throw InputError("distance matrix is not square");
  ++g_weight_calls;

  WeightMatrix w;
  w.beta = beta;
  w.distances = distances;
  w.raw.assign(N, std::vector<double>(N, 0.0));
  if (N == 1) {
    w.raw[0][0] = 1.0;
    w.normalized = w.raw;
    return w;
  }
  for (std::size_t n = 0; n < N; ++n) {
    double peak = 0.0;
    for (std::size_t m = 0; m < N; ++m) {
      if (m == n) continue;
      const double d = std::max(distances[n][m], eps_d);
      w.raw[n][m] = 1.0 / (d * d);
      peak = std::max(peak, w.raw[n][m]);
    }
    w.raw[n][n] = beta * peak;
  }
  w.normalized = normalize_rows(w.raw);
  return w;
}

FusedKnowledge knfu_fuse(std::span<const SoftLabelMatrix> fs, double beta,
                         double eps_d) {
  check_inputs(fs);
  FusedKnowledge out;
  for (const auto& f : fs) out.epds.push_back(compute_epd(f));
  out.weights = weight_matrix(pairwise_kl(out.epds), beta, eps_d);
  const auto& w = out.weights->normalized;
  const std::size_t N = fs.size();
  for (std::size_t n = 0; n < N; ++n) {
    nn::Tensor agg(fs.front().values.shape());
    auto a = agg.values();
    for (std::size_t m = 0; m < N; ++m) {
      const auto v = fs[m].values.values();
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += w[n][m] * v[i];
    }
    out.aggregated.push_back(std::move(agg));
  }
  return out;
}

FusedKnowledge fedmd_fuse(std::span<const SoftLabelMatrix> fs) {
  check_inputs(fs);
  FusedKnowledge out;
  out.aggregated.assign(fs.size(), uniform_mean(fs));
  return out;
}

double default_entropy_threshold(std::size_t num_classes) {
  return std::log(static_cast<double>(num_classes)) / 2.0;
}

FusedKnowledge selective_fd_fuse(std::span<const SoftLabelMatrix> fs,
                                 std::span<const int> transfer_labels,
                                 std::optional<double> tau) {
  check_inputs(fs);
  const std::size_t K = fs.front().values.rows(), C = fs.front().values.row_size();
  if (transfer_labels.size() != K)
    throw InputError("selective_fd_fuse: label count does not match K_t");
  const double threshold = tau.value_or(default_entropy_threshold(C));

  nn::Tensor fused = uniform_mean(fs);
  FusedKnowledge out;
  out.fallback.assign(K, 0);
  std::vector<double> sum(C);
  for (std::size_t i = 0; i < K; ++i) {
    const int y = transfer_labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= C)
      throw InputError("selective_fd_fuse: label " + std::to_string(y) + " out of range");
    std::fill(sum.begin(), sum.end(), 0.0);
    std::size_t kept = 0;
    for (const auto& f : fs) {
      const auto row = f.values.row(i);
      if (nn::argmax(row) != static_cast<std::size_t>(y)) continue;
      if (nn::entropy(row) > threshold) continue;
      for (std::size_t c = 0; c < C; ++c) sum[c] += row[c];
      ++kept;
    }
    if (kept == 0) {
      out.fallback[i] = 1;
      continue;
    }
    auto row = fused.row(i);
    for (std::size_t c = 0; c < C; ++c) row[c] = sum[c] / static_cast<double>(kept);
  }
  out.aggregated.assign(fs.size(), fused);
  return out;
}

std::uint64_t weight_matrix_calls() { return g_weight_calls.load(); }

std::string_view to_string(StrategyId id) {
  switch (id) {
    case StrategyId::KnFu: return "knfu";
    case StrategyId::FedMD: return "fedmd";
    case StrategyId::SelectiveFD: return "selective_fd";
    case StrategyId::Local: return "local";
  }
  return "?";
}

StrategyId parse_strategy(std::string_view name) {
  std::string key;
  for (char ch : name)
    if (std::isalnum(static_cast<unsigned char>(ch)))
      key += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  if (key == "knfu") return StrategyId::KnFu;
  if (key == "fedmd") return StrategyId::FedMD;
  if (key == "selectivefd") return StrategyId::SelectiveFD;
  if (key == "local") return StrategyId::Local;
  throw InputError("unknown strategy '" + std::string(name) + "'");
}

namespace {

class KnFuStrategy final : public FusionStrategy {
 public:
  explicit KnFuStrategy(FusionParams p) : p_(p) {}
  StrategyId id() const override { return StrategyId::KnFu; }
  FusedKnowledge fuse(std::span<const SoftLabelMatrix> fs,
                      std::span<const int>) const override {
    return knfu_fuse(fs, p_.beta, p_.eps_d);
  }

 private:
  FusionParams p_;
};

class FedMdStrategy final : public FusionStrategy {
 public:
  StrategyId id() const override { return StrategyId::FedMD; }
  FusedKnowledge fuse(std::span<const SoftLabelMatrix> fs,
                      std::span<const int>) const override {
    return fedmd_fuse(fs);
  }
};

class SelectiveFdStrategy final : public FusionStrategy {
 public:
  explicit SelectiveFdStrategy(FusionParams p) : p_(p) {}
  StrategyId id() const override { return StrategyId::SelectiveFD; }
  FusedKnowledge fuse(std::span<const SoftLabelMatrix> fs,
                      std::span<const int> labels) const override {
    return selective_fd_fuse(fs, labels, p_.tau);
  }

 private:
  FusionParams p_;
};

}  // namespace

std::unique_ptr<FusionStrategy> make_strategy(StrategyId id, const FusionParams& params) {
  switch (id) {
    case StrategyId::KnFu: return std::make_unique<KnFuStrategy>(params);
    case StrategyId::FedMD: return std::make_unique<FedMdStrategy>();
    case StrategyId::SelectiveFD: return std::make_unique<SelectiveFdStrategy>(params);
    case StrategyId::Local: break;
  }
  throw InputError("the local strategy has no fusion step");
}

std::string round_dump(const FusedKnowledge& fused, std::size_t round) {
  nlohmann::json j;
  j["round"] = round;
  j["epds"] = nlohmann::json::array();
  for (const auto& e : fused.epds)
    j["epds"].push_back({{"client", e.client}, {"distribution", e.distribution}});
  if (fused.weights) {
    j["weights"] = {{"beta", fused.weights->beta},
                    {"distances", fused.weights->distances},
                    {"normalized", fused.weights->normalized}};
  }
  if (!fused.fallback.empty()) {
    std::size_t n = 0;
    for (auto f : fused.fallback) n += f;
    j["fallback_samples"] = n;
  }
  return j.dump();
}

}  // namespace knfu::fusion
