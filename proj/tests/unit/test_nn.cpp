#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "doctest.h"
#include "knfu/errors.hpp"
#include "knfu/nn/checkpoint.hpp"
#include "knfu/nn/losses.hpp"
#include "knfu/nn/model.hpp"
#include "knfu/nn/training.hpp"
#include "test_util.hpp"

using namespace knfu;
using namespace knfu::nn;
using knfu::testing::random_labels;
using knfu::testing::random_matrix;
using knfu::testing::random_simplex;

namespace {

// Single dense layer input -> C with no hidden units.
ModelSpec linear_spec(std::size_t in, std::size_t classes) {
  ModelSpec s;
  s.input = {1, 1, in};
  s.num_classes = classes;
  s.layers = {DenseDesc{classes, Activation::None}};
  return s;
}

ModelSpec tiny_cnn(Padding padding, Activation act, bool pool) {
  ModelSpec s;
  s.input = {2, 6, 6};
  s.num_classes = 3;
  s.layers = {ConvDesc{3, 3, 1, padding, act, pool},
              DenseDesc{4, Activation::Tanh}, DenseDesc{3, Activation::None}};
  return s;
}

}  // namespace

TEST_CASE("softmax reproduces hand-evaluated values") {
  const Tensor z = Tensor::matrix(1, 2, {2.0, 0.0});
  const Tensor p1 = softmax(z, 1.0);
  CHECK(p1(0, 0) == doctest::Approx(0.8808).epsilon(1e-4));
  CHECK(p1(0, 1) == doctest::Approx(0.1192).epsilon(1e-3));
  const Tensor p2 = softmax(z, 2.0);
  CHECK(p2(0, 0) == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(p2(0, 1) == doctest::Approx(0.2689).epsilon(1e-4));
  // exact closed form 1 / (1 + e^-2)
  CHECK(p1(0, 0) == doctest::Approx(1.0 / (1.0 + std::exp(-2.0))).epsilon(1e-15));
}

TEST_CASE("forward through a model with bias-only logits") {
  Model m(linear_spec(3, 2), std::vector<double>{0, 0, 0, 0, 0, 0, 2.0, 0.0});
  const Tensor x = Tensor::matrix(2, 3, {1, 2, 3, -4, 5, 6});
  const Tensor p = forward(m, x, 2.0);
  CHECK(p(1, 0) == doctest::Approx(0.7311).epsilon(1e-4));

  SUBCASE("equal logits give a uniform row at any temperature") {
    Model zero(ModelSpec::mlp_small(3, 5, 4), std::vector<double>(3 * 5 + 5 + 5 * 4 + 4, 0.0));
    for (double t : {0.5, 1.0, 7.0}) {
      const Tensor u = forward(zero, x, t);
      for (double v : u.values()) CHECK(v == doctest::Approx(0.25));
    }
  }
}

TEST_CASE("forward validates inputs") {
  Model m(ModelSpec::mlp_small(4, 3, 2), 1);
  CHECK_THROWS_AS(forward(m, Tensor::matrix(1, 5, std::vector<double>(5)), 1.0), InputError);
  CHECK_THROWS_AS(forward(m, Tensor::matrix(1, 4, std::vector<double>(4)), 0.0), InputError);

  std::vector<double> params(m.parameters().begin(), m.parameters().end());
  params[0] = 1e308;
  Model blown(m.spec(), params);
  try {
    (void)forward(blown, Tensor::matrix(1, 4, {10, 0, 0, 0}), 1.0);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.layer() == 0);
  }
}

TEST_CASE("forward rows are simplex vectors (property)") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t in = 1 + rng() % 6, hidden = 1 + rng() % 8, C = 2 + rng() % 6;
    Model m(ModelSpec::mlp_small(in, hidden, C), rng());
    const Tensor x = random_matrix(1 + rng() % 5, in, rng, 3.0);
    const double T = 0.25 + static_cast<double>(rng() % 100) / 10.0;
    const Tensor p = forward(m, x, T);
    for (std::size_t r = 0; r < p.rows(); ++r) {
      double sum = 0.0;
      for (double v : p.row(r)) {
        CHECK(v >= 0.0);
        sum += v;
      }
      CHECK(std::abs(sum - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("M1 and M2 have the expected parameter counts") {
  // M1: conv 1->32 (3x3), conv 32->64, 5x5x64 -> 64 -> 32 -> 10
  CHECK(ModelSpec::m1().parameter_count() ==
        (32 * 9 + 32) + (64 * 32 * 9 + 64) + (1600 * 64 + 64) + (64 * 32 + 32) + (32 * 10 + 10));
  // M2: four same-padded conv units on 32x32x3, 2x2x32 -> 128 -> 10
  CHECK(ModelSpec::m2().parameter_count() ==
        (16 * 27 + 16) + (16 * 144 + 16) + (32 * 144 + 32) + (32 * 288 + 32) +
            (128 * 128 + 128) + (128 * 10 + 10));
  CHECK(ModelSpec::mlp_small(4, 3, 2).parameter_count() == 4 * 3 + 3 + 3 * 2 + 2);

  Model m1(ModelSpec::m1(), 3);
  std::mt19937_64 rng(3);
  const Tensor flat = random_matrix(2, 784, rng);
  const Tensor x({2, 1, 28, 28}, std::vector<double>(flat.values().begin(), flat.values().end()));
  CHECK(forward(m1, x).shape() == std::vector<std::size_t>{2, 10});
}

TEST_CASE("invalid topologies are rejected") {
  ModelSpec s = ModelSpec::mlp_small(4, 3, 2);
  s.num_classes = 3;
  CHECK_THROWS_AS(s.validate(), InputError);
  s = ModelSpec::mlp_small(4, 3, 2);
  std::get<DenseDesc>(s.layers.back()).activation = Activation::Relu;
  CHECK_THROWS_AS(s.validate(), InputError);
  s = ModelSpec::mlp_small(4, 3, 2);
  s.layers.push_back(ConvDesc{});
  CHECK_THROWS_AS(s.validate(), InputError);
}

TEST_CASE("cross-entropy examples") {
  CHECK(ce_loss(Tensor::matrix(1, 3, {0, 1, 0}), std::vector<int>{1}) == 0.0);
  std::vector<double> uniform(10, 0.1);
  CHECK(ce_loss(Tensor::matrix(1, 10, uniform), std::vector<int>{4}) ==
        doctest::Approx(std::log(10.0)));
  CHECK(ce_loss(Tensor::matrix(2, 2, {0.5, 0.5, 0.25, 0.75}), std::vector<int>{0, 1}) ==
        doctest::Approx((-std::log(0.5) - std::log(0.75)) / 2));
  CHECK(ce_loss(Tensor::matrix(2, 2, {0.5, 0.5, 0.25, 0.75}), std::vector<int>{0, 1}) ==
        doctest::Approx(0.4904).epsilon(1e-4));
  // zero probability at the true class is clamped, not infinite
  CHECK(ce_loss(Tensor::matrix(1, 2, {1, 0}), std::vector<int>{1}) ==
        doctest::Approx(-std::log(kEpsLog)));
  CHECK_THROWS_AS(ce_loss(Tensor::matrix(1, 2, {1, 0}), std::vector<int>{2}), InputError);
}

TEST_CASE("KL divergence examples") {
  const Tensor t = Tensor::matrix(1, 2, {0.9, 0.1});
  const Tensor s = Tensor::matrix(1, 2, {0.5, 0.5});
  CHECK(kl_loss(s, t) == doctest::Approx(0.9 * std::log(0.9 / 0.5) + 0.1 * std::log(0.1 / 0.5)));
  CHECK(kl_loss(s, t) == doctest::Approx(0.3681).epsilon(1e-4));
  CHECK(kl_loss(t, t) == 0.0);
  for (std::size_t C : {2u, 5u, 10u}) {
    std::vector<double> u(C, 1.0 / static_cast<double>(C));
    CHECK(kl_loss(Tensor::matrix(1, C, u), Tensor::matrix(1, C, u)) == 0.0);
  }
  // a zero student entry is clamped
  CHECK(std::isfinite(kl_loss(Tensor::matrix(1, 2, {1, 0}), t)));
  CHECK_THROWS_AS(kl_loss(s, Tensor::matrix(1, 3, {0.2, 0.3, 0.5})), InputError);
}

TEST_CASE("KL is nonnegative and zero on identical inputs (property)") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t rows = 1 + rng() % 6, C = 2 + rng() % 9;
    const Tensor a = random_simplex(rows, C, rng);
    const Tensor b = random_simplex(rows, C, rng);
    CHECK(kl_loss(a, b) >= 0.0);
    CHECK(kl_loss(a, a) == 0.0);
  }
}

TEST_CASE("losses are permutation-equivariant in the class axis") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t rows = 1 + rng() % 5, C = 2 + rng() % 8;
    const Tensor a = random_simplex(rows, C, rng);
    const Tensor b = random_simplex(rows, C, rng);
    auto labels = random_labels(rows, static_cast<int>(C), rng);
    std::vector<std::size_t> perm(C);
    std::iota(perm.begin(), perm.end(), 0u);
    std::shuffle(perm.begin(), perm.end(), rng);
    auto permute = [&](const Tensor& m) {
      Tensor out = m;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < C; ++c) out(r, perm[c]) = m(r, c);
      return out;
    };
    std::vector<int> plabels(rows);
    for (std::size_t r = 0; r < rows; ++r)
      plabels[r] = static_cast<int>(perm[static_cast<std::size_t>(labels[r])]);
    CHECK(ce_loss(permute(a), plabels) == doctest::Approx(ce_loss(a, labels)).epsilon(1e-12));
    CHECK(kl_loss(permute(a), permute(b)) == doctest::Approx(kl_loss(a, b)).epsilon(1e-12));
  }
}

TEST_CASE("soften at temperature 1 is the identity") {
  std::mt19937_64 rng(2);
  const Tensor p = random_simplex(3, 4, rng);
  CHECK(soften(p, 1.0) == p);
  const Tensor q = soften(p, 3.0);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0.0;
    for (double v : q.row(r)) s += v;
    CHECK(s == doctest::Approx(1.0));
  }
}

TEST_CASE("lambda = 0 step is exactly a cross-entropy step") {
  std::mt19937_64 rng(19);
  Model m(ModelSpec::mlp_small(4, 6, 3), 42);
  const Tensor x = random_matrix(8, 4, rng);
  const auto y = random_labels(8, 3, rng);

  const Gradient g = compute_gradient(m, x, LossSpec{y});
  Model expected = m;
  for (std::size_t i = 0; i < g.values.size(); ++i)
    expected.parameters()[i] -= 0.05 * g.values[i];

  SgdState sgd{0.05, 8};
  const double loss = backward_step(m, x, LossSpec{y, nullptr, 0.0}, sgd);
  CHECK(loss == g.loss);
  CHECK(m == expected);
}

TEST_CASE("cross-entropy gradient of a linear model matches the closed form") {
  std::mt19937_64 rng(23);
  const std::size_t in = 3, C = 4, B = 5;
  Model m(linear_spec(in, C), 9);
  const Tensor x = random_matrix(B, in, rng);
  const auto y = random_labels(B, C, rng);
  const Gradient g = compute_gradient(m, x, LossSpec{y});
  const Tensor p = forward(m, x);
  // dW[c][i] = mean_b (p[b][c] - [y_b == c]) x[b][i]; db[c] = mean_b (...)
  for (std::size_t c = 0; c < C; ++c) {
    double db = 0.0;
    for (std::size_t i = 0; i < in; ++i) {
      double dw = 0.0;
      for (std::size_t b = 0; b < B; ++b)
        dw += (p(b, c) - (static_cast<std::size_t>(y[b]) == c ? 1.0 : 0.0)) * x(b, i);
      CHECK(g.values[c * in + i] == doctest::Approx(dw / B).epsilon(1e-12));
    }
    for (std::size_t b = 0; b < B; ++b)
      db += p(b, c) - (static_cast<std::size_t>(y[b]) == c ? 1.0 : 0.0);
    CHECK(g.values[C * in + c] == doctest::Approx(db / B).epsilon(1e-12));
  }
}

TEST_CASE("converged student with matching target has zero loss and no update") {
  Model m(linear_spec(2, 2), std::vector<double>{0, 0, 0, 0, 50.0, 0.0});
  const Tensor x = Tensor::matrix(2, 2, {1, -1, 0.5, 2});
  const Tensor target = forward(m, x);
  const std::vector<int> y{0, 0};
  Model before = m;
  SgdState sgd{0.1, 2};
  const double loss = backward_step(m, x, LossSpec{y, &target, 1.0}, sgd);
  CHECK(loss == 0.0);
  CHECK(testing::max_abs_diff(m.parameters(), before.parameters()) < 1e-15);
}

TEST_CASE("distillation target must be present iff lambda > 0") {
  Model m(ModelSpec::mlp_small(2, 2, 2), 1);
  const Tensor x = Tensor::matrix(1, 2, {1, 2});
  const Tensor t = Tensor::matrix(1, 2, {0.5, 0.5});
  const std::vector<int> y{1};
  SgdState sgd;
  CHECK_THROWS_AS(backward_step(m, x, LossSpec{y, &t, 0.0}, sgd), InputError);
  CHECK_THROWS_AS(backward_step(m, x, LossSpec{y, nullptr, 1.0}, sgd), InputError);
  CHECK_THROWS_AS(backward_step(m, x, LossSpec{y, &t, -1.0}, sgd), InputError);
}

TEST_CASE("exploding gradients are clipped and counted") {
  Model m(linear_spec(1, 2), std::vector<double>{0, 0, 0, 0});
  const Tensor x = Tensor::matrix(1, 1, {1e3});
  const std::vector<int> y{1};
  SgdState sgd{1.0, 1};
  backward_step(m, x, LossSpec{y}, sgd);
  CHECK(sgd.clipped == 2);  // both weights see |g| = 500
  CHECK(std::abs(m.parameters()[0]) == doctest::Approx(kGradCap));
}

TEST_CASE("gradient check: zero-weight linear model, symmetric input") {
  Model m(linear_spec(2, 2), std::vector<double>{0, 0, 0, 0, 0, 0});
  const Tensor x = Tensor::matrix(2, 2, {1, -1, -1, 1});
  const std::vector<int> y{0, 1};
  const Gradient g = compute_gradient(m, x, LossSpec{y});
  CHECK(g.values[4] == 0.0);  // bias gradients cancel exactly
  CHECK(g.values[5] == 0.0);
  CHECK(gradient_check(m, x, LossSpec{y}) < 1e-9);
}

TEST_CASE("gradient check on MLP-small for every loss configuration") {
  std::mt19937_64 rng(1234);
  const Tensor x = random_matrix(8, 4, rng);
  const auto y = random_labels(8, 3, rng);
  const Tensor target = random_simplex(8, 3, rng);
  Model m(ModelSpec::mlp_small(4, 6, 3), 77);
  CHECK(gradient_check(m, x, LossSpec{y}) < 1e-4);
  CHECK(gradient_check(m, x, LossSpec{y, &target, 2.0}) < 1e-4);
  CHECK(gradient_check(m, x, LossSpec{y, &target, 0.5}) < 1e-4);
  CHECK(gradient_check(m, x, LossSpec{y, &target, 1.0, false}) < 1e-4);
  CHECK(composite_loss(m, x, LossSpec{y, &target, 1.0, false}) ==
        doctest::Approx(kl_loss(forward(m, x), target)).epsilon(1e-12));

  SUBCASE("4-3-2 network, single step") {
    Model tiny(ModelSpec::mlp_small(4, 3, 2), 5);
    const Tensor xt = random_matrix(3, 4, rng);
    const auto yt = random_labels(3, 2, rng);
    CHECK(gradient_check(tiny, xt, LossSpec{yt}) < 1e-4);
  }
}

TEST_CASE("gradient check through convolution and pooling") {
  std::mt19937_64 rng(99);
  const Tensor flat = random_matrix(3, 2 * 6 * 6, rng);
  const Tensor x({3, 2, 6, 6}, std::vector<double>(flat.values().begin(), flat.values().end()));
  const auto y = random_labels(3, 3, rng);
  const Tensor target = random_simplex(3, 3, rng);
  for (auto spec : {tiny_cnn(Padding::Valid, Activation::Relu, true),
                    tiny_cnn(Padding::Same, Activation::Tanh, false),
                    tiny_cnn(Padding::Same, Activation::Relu, true)}) {
    Model m(spec, 17);
    CHECK(gradient_check(m, x, LossSpec{y}) < 1e-4);
    CHECK(gradient_check(m, x, LossSpec{y, &target, 1.5}) < 1e-4);
  }
}

TEST_CASE("training is deterministic and reduces loss") {
  std::mt19937_64 rng(3);
  const Tensor x = random_matrix(40, 5, rng);
  std::vector<int> y(40);
  for (std::size_t i = 0; i < 40; ++i) y[i] = x(i, 0) > 0 ? 1 : 0;

  auto run = [&] {
    Model m(ModelSpec::mlp_small(5, 8, 2), 11);
    SgdState sgd{0.1, 8};
    Rng r = make_rng(4);
    double first = 0.0, last = 0.0;
    for (int e = 0; e < 30; ++e) {
      const auto s = train_epoch(m, x, y, nullptr, 0.0, sgd, r);
      if (e == 0) first = s.mean_loss;
      last = s.mean_loss;
      CHECK(s.steps == 5);
      CHECK(s.samples == 40);
    }
    CHECK(last < first);
    return m;
  };
  CHECK(run() == run());
}

TEST_CASE("checkpoint round trip stores float32 parameters") {
  const auto dir = std::filesystem::temp_directory_path() / "knfu_test_ckpt";
  std::filesystem::create_directories(dir);
  const auto path = dir / "m.knfu";
  Model m(ModelSpec::mlp_small(4, 3, 2), 8);
  save_checkpoint(m, path);

  std::ifstream f(path, std::ios::binary);
  char magic[4];
  f.read(magic, 4);
  CHECK(std::string(magic, 4) == "KNFU");

  const Model back = load_checkpoint(path, m.spec());
  for (std::size_t i = 0; i < m.parameters().size(); ++i)
    CHECK(back.parameters()[i] == static_cast<double>(static_cast<float>(m.parameters()[i])));
  CHECK_THROWS_AS(load_checkpoint(path, ModelSpec::mlp_small(4, 4, 2)), InputError);

  std::ofstream(dir / "bad.knfu") << "NOPE";
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.knfu", m.spec()), IoError);
}
