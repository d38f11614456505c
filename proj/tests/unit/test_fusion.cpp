#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "fusion_oracle.hpp"
#include "json.hpp"
#include "knfu/errors.hpp"
#include "knfu/fusion/fusion.hpp"
#include "knfu/nn/losses.hpp"
#include "knfu/nn/model.hpp"
#include "test_util.hpp"

using namespace knfu;
using namespace knfu::fusion;
using knfu::testing::random_simplex;

namespace {

SoftLabelMatrix slm(std::size_t client, std::size_t rows, std::size_t cols,
                    std::vector<double> v) {
  return {client, nn::Tensor::matrix(rows, cols, std::move(v))};
}

std::vector<SoftLabelMatrix> random_instance(std::mt19937_64& rng, std::size_t N,
                                             std::size_t K, std::size_t C) {
  std::vector<SoftLabelMatrix> fs;
  for (std::size_t n = 0; n < N; ++n) fs.push_back({n, random_simplex(K, C, rng)});
  return fs;
}

testing::Rows to_rows(const nn::Tensor& t) {
  testing::Rows r;
  for (std::size_t i = 0; i < t.rows(); ++i) r.emplace_back(t.row(i).begin(), t.row(i).end());
  return r;
}

double max_norm(const nn::Tensor& a, const nn::Tensor& b) {
  return testing::max_abs_diff(a.values(), b.values());
}

void check_simplex(const FusedKnowledge& fk) {
  for (const auto& t : fk.aggregated)
    for (std::size_t i = 0; i < t.rows(); ++i) {
      const auto row = t.row(i);
      CHECK(*std::min_element(row.begin(), row.end()) >= 0.0);
      CHECK(std::abs(std::accumulate(row.begin(), row.end(), 0.0) - 1.0) <= 1e-9);
    }
}

}  // namespace

TEST_CASE("EPD is the column mean") {
  const auto uniform = compute_epd(slm(0, 2, 4, std::vector<double>(8, 0.25)));
  for (double v : uniform.distribution) CHECK(v == 0.25);
  const auto e = compute_epd(slm(3, 2, 2, {0.8, 0.2, 0.6, 0.4}));
  CHECK(e.client == 3);
  CHECK(e.distribution[0] == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(e.distribution[1] == doctest::Approx(0.3).epsilon(1e-15));
  CHECK_THROWS_AS(compute_epd(SoftLabelMatrix{0, nn::Tensor({0, 3})}), InputError);
}

TEST_CASE("pairwise KL") {
  const std::vector<Epd> same{{0, {0.2, 0.8}}, {1, {0.2, 0.8}}, {2, {0.2, 0.8}}};
  for (const auto& row : pairwise_kl(same))
    for (double v : row) CHECK(v == 0.0);

  const std::vector<Epd> pq{{0, {0.5, 0.5}}, {1, {0.9, 0.1}}};
  const auto d = pairwise_kl(pq);
  CHECK(d[0][1] == doctest::Approx(0.5108).epsilon(1e-4));
  CHECK(d[1][0] == doctest::Approx(0.3681).epsilon(1e-4));
  CHECK(d[0][0] == 0.0);
  CHECK(d[1][1] == 0.0);

  const std::vector<Epd> mixed{{0, {0.5, 0.5}}, {1, {0.2, 0.3, 0.5}}};
  CHECK_THROWS_AS(pairwise_kl(mixed), InputError);
}

TEST_CASE("weight matrix examples") {
  const WeightMatrix w = weight_matrix({{0, 0.5108}, {0.5108, 0}}, 10.0);
  CHECK(w.raw[0][1] == doctest::Approx(3.833).epsilon(1e-3));

  const Matrix eq{{0, 0.3, 0.3}, {0.3, 0, 0.3}, {0.3, 0.3, 0}};
  const auto w3 = weight_matrix(eq, 10.0);
  CHECK(w3.normalized[0][0] == doctest::Approx(10.0 / 12.0).epsilon(1e-14));
  CHECK(w3.normalized[0][1] == doctest::Approx(1.0 / 12.0).epsilon(1e-14));
  CHECK(w3.normalized[0][2] == doctest::Approx(1.0 / 12.0).epsilon(1e-14));

  const auto big = weight_matrix(eq, 1e9);
  CHECK(big.normalized[1][1] > 1.0 - 1e-8);
  CHECK(big.normalized[1][0] < 1e-8);

  const auto one = weight_matrix({{0.0}}, 10.0);
  CHECK(one.normalized == Matrix{{1.0}});

  CHECK_THROWS_AS(weight_matrix(eq, 0.0), InputError);
  CHECK_THROWS_AS(weight_matrix(eq, -1.0), InputError);
}

TEST_CASE("weights count calls") {
  const auto before = weight_matrix_calls();
  weight_matrix({{0, 1}, {1, 0}}, 10.0);
  CHECK(weight_matrix_calls() == before + 1);
}

TEST_CASE("knfu_fuse examples") {
  const std::vector<SoftLabelMatrix> single{slm(0, 2, 3, {0.2, 0.3, 0.5, 0.1, 0.1, 0.8})};
  const auto f1 = knfu_fuse(single);
  CHECK(f1.aggregated[0] == single[0].values);

  // Two clients whose self weight comes out at 3x the peer weight.
  const std::vector<SoftLabelMatrix> ab{slm(0, 1, 2, {1, 0}), slm(1, 1, 2, {0, 1})};
  const auto fk = knfu_fuse(ab, 3.0);
  REQUIRE(fk.weights.has_value());
  CHECK(fk.weights->normalized[0][0] == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(fk.aggregated[0](0, 0) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(fk.aggregated[0](0, 1) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(fk.epds.size() == 2);

  std::mt19937_64 rng(11);
  const auto fs = random_instance(rng, 4, 5, 3);
  std::vector<testing::Rows> rows;
  for (const auto& f : fs) rows.push_back(to_rows(f.values));
  const auto oracle = testing::brute_knfu(rows, 10.0);
  const auto got = knfu_fuse(fs, 10.0);
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t c = 0; c < 3; ++c)
        CHECK(std::abs(got.aggregated[n](i, c) - oracle[n][i][c]) <= 1e-12);

  std::vector<SoftLabelMatrix> bad = fs;
  bad[2].values = random_simplex(6, 3, rng);
  CHECK_THROWS_AS(knfu_fuse(bad), InputError);
  CHECK_THROWS_AS(knfu_fuse(std::span<const SoftLabelMatrix>{}), InputError);
}

TEST_CASE("fedmd_fuse examples") {
  const std::vector<SoftLabelMatrix> single{slm(0, 1, 2, {0.3, 0.7})};
  CHECK(fedmd_fuse(single).aggregated[0] == single[0].values);

  const std::vector<SoftLabelMatrix> ab{slm(0, 1, 2, {1, 0}), slm(1, 1, 2, {0, 1})};
  const auto fk = fedmd_fuse(ab);
  for (const auto& t : fk.aggregated) {
    CHECK(t(0, 0) == 0.5);
    CHECK(t(0, 1) == 0.5);
  }
  CHECK_FALSE(fk.weights.has_value());

  // Permuting rows within each matrix keeps every column mean equal.
  std::mt19937_64 rng(5);
  const auto base = random_simplex(6, 4, rng);
  std::vector<SoftLabelMatrix> fs;
  for (std::size_t n = 0; n < 5; ++n) {
    std::vector<std::size_t> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    nn::Tensor t({6, 4});
    for (std::size_t i = 0; i < 6; ++i)
      std::copy(base.row(perm[i]).begin(), base.row(perm[i]).end(), t.row(i).begin());
    fs.push_back({n, t});
  }
  const auto mean = fedmd_fuse(fs);
  const auto knfu = knfu_fuse(fs, 1.0);
  for (std::size_t n = 0; n < 5; ++n) CHECK(max_norm(mean.aggregated[n], knfu.aggregated[n]) <= 1e-12);
}

TEST_CASE("selective_fd_fuse examples") {
  CHECK(default_entropy_threshold(10) == doctest::Approx(std::log(10.0) / 2));

  const std::vector<SoftLabelMatrix> confident{
      slm(0, 2, 3, {0.9, 0.05, 0.05, 0.02, 0.96, 0.02}),
      slm(1, 2, 3, {0.88, 0.06, 0.06, 0.1, 0.85, 0.05})};
  const std::vector<int> labels{0, 1};
  const auto s = selective_fd_fuse(confident, labels);
  const auto m = fedmd_fuse(confident);
  for (std::size_t n = 0; n < 2; ++n) CHECK(max_norm(s.aggregated[n], m.aggregated[n]) <= 1e-15);
  CHECK(s.fallback == std::vector<std::uint8_t>{0, 0});

  SUBCASE("wrong argmax is excluded") {
    auto fs = confident;
    fs.push_back(slm(2, 2, 3, {0.1, 0.8, 0.1, 0.02, 0.96, 0.02}));
    const auto out = selective_fd_fuse(fs, labels);
    CHECK(out.aggregated[0](0, 0) == doctest::Approx(0.89).epsilon(1e-15));
    CHECK(out.aggregated[0](1, 1) == doctest::Approx((0.96 + 0.85 + 0.96) / 3).epsilon(1e-15));
  }
  SUBCASE("nothing survives falls back to the mean") {
    const auto out = selective_fd_fuse(confident, std::vector<int>{2, 1});
    CHECK(out.fallback == std::vector<std::uint8_t>{1, 0});
    CHECK(out.aggregated[1](0, 0) == doctest::Approx(0.89));
  }
  SUBCASE("entropy filter matches filter-then-mean") {
    std::mt19937_64 rng(8);
    const std::size_t N = 6, K = 12, C = 5;
    std::vector<SoftLabelMatrix> fs;
    for (std::size_t n = 0; n < N; ++n) {
      auto t = testing::random_matrix(K, C, rng, 2.5);
      fs.push_back({n, nn::softmax(t, 1.0)});
    }
    const auto y = testing::random_labels(K, static_cast<int>(C), rng);
    const double tau = 1.5;
    const auto out = selective_fd_fuse(fs, y, tau);
    for (std::size_t i = 0; i < K; ++i) {
      std::vector<double> sum(C, 0.0), all(C, 0.0);
      int kept = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const auto row = fs[n].values.row(i);
        for (std::size_t c = 0; c < C; ++c) all[c] += row[c] / static_cast<double>(N);
        const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        double h = 0.0;
        for (double v : row) h -= v > 0 ? v * std::log(v) : 0.0;
        if (best != static_cast<std::size_t>(y[i]) || h > tau) continue;
        ++kept;
        for (std::size_t c = 0; c < C; ++c) sum[c] += row[c];
      }
      CHECK(out.fallback[i] == (kept == 0));
      for (std::size_t c = 0; c < C; ++c) {
        const double want = kept ? sum[c] / kept : all[c];
        CHECK(std::abs(out.aggregated[3](i, c) - want) <= 1e-12);
      }
    }
  }
  CHECK_THROWS_AS(selective_fd_fuse(confident, std::vector<int>{0}), InputError);
  CHECK_THROWS_AS(selective_fd_fuse(confident, std::vector<int>{0, 3}), InputError);
}

TEST_CASE("fused rows stay on the simplex (property)") {
  std::mt19937_64 rng(101);
  for (int trial = 0; trial < 150; ++trial) {
    const std::size_t N = 1 + rng() % 8, K = 1 + rng() % 20, C = 2 + rng() % 9;
    const auto fs = random_instance(rng, N, K, C);
    const auto y = testing::random_labels(K, static_cast<int>(C), rng);
    check_simplex(knfu_fuse(fs, 0.1 + static_cast<double>(rng() % 100)));
    check_simplex(fedmd_fuse(fs));
    check_simplex(selective_fd_fuse(fs, y));
  }
}

TEST_CASE("normalized weights (property)") {
  std::mt19937_64 rng(202);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (int trial = 0; trial < 150; ++trial) {
    const std::size_t N = 2 + rng() % 7;
    Matrix d(N, std::vector<double>(N, 0.0));
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t m = 0; m < N; ++m)
        if (m != n) d[n][m] = u(rng) + 1e-3;
    const double beta = 0.5 + u(rng) * 10;
    const auto w = weight_matrix(d, beta);
    for (const auto& row : w.normalized) {
      CHECK(std::abs(std::accumulate(row.begin(), row.end(), 0.0) - 1.0) <= 1e-9);
      for (double v : row) CHECK((v >= 0.0 && v <= 1.0));
    }

    Matrix scaled = w.raw;
    const double k = std::exp(u(rng) * 5 - 2.5);
    for (auto& row : scaled)
      for (double& v : row) v *= k;
    const auto again = normalize_rows(scaled);
    for (std::size_t n = 0; n < N; ++n)
      CHECK(testing::max_abs_diff(again[n], w.normalized[n]) <= 1e-14);

    // Moving one peer closer strictly raises its share, even when that peer
    // also sets the self weight. With one peer the share is 1/(1+beta).
    const std::size_t n = rng() % N;
    std::size_t m = (n + 1 + rng() % (N - 1)) % N;
    auto nearer = d;
    nearer[n][m] *= 0.9;
    const auto w2 = weight_matrix(nearer, beta);
    if (N >= 3)
      CHECK(w2.normalized[n][m] > w.normalized[n][m]);
    else
      CHECK(w2.normalized[n][m] == doctest::Approx(1.0 / (1.0 + beta)).epsilon(1e-14));
  }
}

TEST_CASE("large beta recovers own knowledge (property)") {
  std::mt19937_64 rng(303);
  for (int trial = 0; trial < 120; ++trial) {
    const auto fs = random_instance(rng, 2 + rng() % 7, 1 + rng() % 20, 2 + rng() % 9);
    const auto out = knfu_fuse(fs, 1e9);
    for (std::size_t n = 0; n < fs.size(); ++n) CHECK(max_norm(out.aggregated[n], fs[n].values) < 1e-3);
  }
}

TEST_CASE("client permutation (property)") {
  std::mt19937_64 rng(404);
  for (int trial = 0; trial < 120; ++trial) {
    const std::size_t N = 2 + rng() % 7;
    const auto fs = random_instance(rng, N, 1 + rng() % 20, 2 + rng() % 9);
    std::vector<std::size_t> perm(N);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<SoftLabelMatrix> shuffled;
    for (auto p : perm) shuffled.push_back(fs[p]);

    const auto a = knfu_fuse(fs), b = knfu_fuse(shuffled);
    const auto ma = fedmd_fuse(fs), mb = fedmd_fuse(shuffled);
    for (std::size_t i = 0; i < N; ++i) {
      CHECK(max_norm(b.aggregated[i], a.aggregated[perm[i]]) <= 1e-12);
      CHECK(max_norm(mb.aggregated[i], ma.aggregated[0]) <= 1e-12);
    }
  }
}

TEST_CASE("strategy factory and dump") {
  for (auto id : {StrategyId::KnFu, StrategyId::FedMD, StrategyId::SelectiveFD, StrategyId::Local})
    CHECK(parse_strategy(to_string(id)) == id);
  CHECK(parse_strategy("Selective-FD") == StrategyId::SelectiveFD);
  CHECK_THROWS_AS(parse_strategy("fedavg"), InputError);
  CHECK_THROWS_AS(make_strategy(StrategyId::Local), InputError);

  std::mt19937_64 rng(7);
  const auto fs = random_instance(rng, 3, 4, 3);
  const std::vector<int> y{0, 1, 2, 0};
  const auto s = make_strategy(StrategyId::KnFu, {2.0});
  CHECK(s->id() == StrategyId::KnFu);
  const auto fused = s->fuse(fs, y);
  CHECK(max_norm(fused.aggregated[1], knfu_fuse(fs, 2.0).aggregated[1]) == 0.0);
  CHECK(make_strategy(StrategyId::SelectiveFD)->fuse(fs, y).fallback.size() == 4);

  const auto j = nlohmann::json::parse(round_dump(fused, 7));
  CHECK(j["round"] == 7);
  CHECK(j["epds"].size() == 3);
  CHECK(j["weights"]["normalized"][2][2].get<double>() == fused.weights->normalized[2][2]);
}
