#include <cmath>
#include <random>

#include "doctest.h"
#include "pulsegate/error.hpp"
#include "pulsegate/nncore.hpp"
#include "test_support.hpp"

using namespace pulsegate;
using namespace pulsegate::nn;
using pulsegate::testing::random_matrix;

TEST_CASE("dense forward worked examples") {
  Dense<double> layer("d", 2, 2, Activation::linear);
  layer.weight.value = Matrix<double>::from_rows({{1, 0}, {0, 1}});
  auto y = layer.forward(Matrix<double>::from_rows({{1, 2}}));
  CHECK(y(0, 0) == 1.0);
  CHECK(y(0, 1) == 2.0);

  layer.activation = Activation::relu;
  y = layer.forward(Matrix<double>::from_rows({{-1, 2}}));
  CHECK(y(0, 0) == 0.0);
  CHECK(y(0, 1) == 2.0);

  Dense<double> unit("u", 1, 1, Activation::sigmoid);
  unit.weight.value(0, 0) = 1.0;
  CHECK(unit.forward(Matrix<double>::from_rows({{0}}))(0, 0) == doctest::Approx(0.5));
}

TEST_CASE("dense backward worked examples") {
  Dense<double> unit("u", 1, 1, Activation::linear);
  unit.weight.value(0, 0) = 2.0;
  DenseCache<double> cache;
  unit.forward(Matrix<double>::from_rows({{3}}), &cache);
  const auto dx = unit.backward(cache, Matrix<double>::from_rows({{1}}));
  CHECK(unit.weight.grad(0, 0) == 3.0);
  CHECK(unit.bias.grad(0, 0) == 1.0);
  CHECK(dx(0, 0) == 2.0);

  Dense<double> gated("g", 1, 1, Activation::relu);
  gated.weight.value(0, 0) = 1.0;
  gated.forward(Matrix<double>::from_rows({{-5}}), &cache);
  const auto dx0 = gated.backward(cache, Matrix<double>::from_rows({{1}}));
  CHECK(dx0(0, 0) == 0.0);
  CHECK(gated.weight.grad(0, 0) == 0.0);
  CHECK(gated.bias.grad(0, 0) == 0.0);
}

TEST_CASE("dense shape mismatch") {
  Dense<float> layer("d", 3, 2, Activation::linear);
  CHECK_THROWS_AS(layer.forward(Matrix<float>(1, 2)), Error);
}

TEST_CASE("lstm zero parameters give zero outputs") {
  Lstm<double> lstm("l", 1, 3);
  std::mt19937_64 rng(1);
  const auto x = pulsegate::testing::random_sequence<double>(12, 2, 1, rng);
  const auto out = lstm.forward(x, ReturnMode::full_sequence);
  REQUIRE(out.size() == 12);
  for (const auto& step : out) {
    for (double v : step.values()) CHECK(v == 0.0);
  }
}

TEST_CASE("lstm saturated gates reproduce tanh(0.5)") {
  Lstm<double> lstm("l", 1, 1);
  lstm.bias.value = Matrix<double>::from_rows({{40.0, 40.0, std::atanh(0.5), 40.0}});
  SequenceBatch<double> x{Matrix<double>::from_rows({{0.3}})};
  const auto h = lstm.forward(x, ReturnMode::last_state);
  CHECK(h[0](0, 0) == doctest::Approx(std::tanh(0.5)).epsilon(1e-12));
  CHECK(h[0](0, 0) == doctest::Approx(0.462).epsilon(1e-3));
}

TEST_CASE("lstm last_state shape") {
  Lstm<float> lstm("l", 1, 7);
  std::mt19937_64 rng(2);
  const auto out = lstm.forward(pulsegate::testing::random_sequence<float>(12, 3, 1, rng), ReturnMode::last_state);
  REQUIRE(out.size() == 1);
  CHECK(out[0].rows() == 3);
  CHECK(out[0].cols() == 7);
}

TEST_CASE("lstm zero upstream gives zero gradients, runs are deterministic") {
  std::mt19937_64 rng(3);
  Lstm<double> lstm("l", 1, 3);
  pulsegate::testing::randomize(lstm.kernel, rng);
  pulsegate::testing::randomize(lstm.recurrent, rng);
  const auto x = pulsegate::testing::random_sequence<double>(5, 2, 1, rng);
  LstmCache<double> cache;
  lstm.forward(x, ReturnMode::full_sequence, &cache);
  lstm.backward(cache, SequenceBatch<double>(5, Matrix<double>(2, 3)));
  for (double g : lstm.kernel.grad.values()) CHECK(g == 0.0);
  for (double g : lstm.recurrent.grad.values()) CHECK(g == 0.0);

  const auto up = pulsegate::testing::random_sequence<double>(5, 2, 3, rng);
  lstm.forward(x, ReturnMode::full_sequence, &cache);
  lstm.backward(cache, up);
  const auto first = lstm.recurrent.grad;
  lstm.recurrent.zero_grad();
  lstm.kernel.zero_grad();
  lstm.bias.zero_grad();
  lstm.forward(x, ReturnMode::full_sequence, &cache);
  lstm.backward(cache, up);
  CHECK(lstm.recurrent.grad == first);
}

TEST_CASE("conv1d output lengths") {
  CHECK(Conv1d<float>::output_length(12, 3, 3) == 4);
  CHECK(Conv1d<float>::output_length(12, 3, 2) == 5);
  CHECK_THROWS_AS(Conv1d<float>::output_length(2, 3, 1), Error);
  try {
    Conv1d<float>::output_length(2, 3, 1);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::KernelTooLarge);
  }
}

TEST_CASE("conv1d kernel 1 with unit weight is identity") {
  Conv1d<double> conv("c", 1, 1, 1, 1);
  conv.weight.value(0, 0) = 1.0;
  std::mt19937_64 rng(4);
  const auto x = pulsegate::testing::random_sequence<double>(12, 2, 1, rng);
  const auto y = conv.forward(x);
  REQUIRE(y.size() == 12);
  for (std::size_t t = 0; t < 12; ++t) CHECK(y[t] == x[t]);
}

TEST_CASE("batchnorm worked examples") {
  BatchNorm<double> bn("bn", 1);
  SequenceBatch<double> x{Matrix<double>::from_rows({{1}, {3}})};
  const auto y = bn.forward(x, Mode::train);
  const double scale = 1.0 / std::sqrt(1.0 + 0.001);
  CHECK(y[0](0, 0) == doctest::Approx(-scale).epsilon(1e-12));
  CHECK(y[0](1, 0) == doctest::Approx(scale).epsilon(1e-12));
  // running <- 0.99 * running + 0.01 * batch
  CHECK(bn.running_mean(0, 0) == doctest::Approx(0.02));
  CHECK(bn.running_var(0, 0) == doctest::Approx(0.99 + 0.01));

  BatchNorm<double> fresh("bn", 1);
  const auto inferred = fresh.forward(SequenceBatch<double>{Matrix<double>::from_rows({{2.5}})}, Mode::infer);
  CHECK(inferred[0](0, 0) == doctest::Approx(2.5 / std::sqrt(1.001)));

  BatchNorm<double> flat("bn", 1);
  flat.gamma.value(0, 0) = 0.0;
  flat.beta.value(0, 0) = 0.7;
  for (const auto& step : flat.forward(x, Mode::train)) {
    for (double v : step.values()) CHECK(v == 0.7);
  }

  BatchNorm<double> single("bn", 1);
  CHECK_THROWS_AS(single.forward(SequenceBatch<double>{Matrix<double>(1, 1)}, Mode::train), Error);
}

TEST_CASE("batchnorm train outputs are standardized per channel") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    BatchNorm<double> bn("bn", 3);
    const auto x = pulsegate::testing::random_sequence<double>(4, 6, 3, rng, 5.0);
    const auto y = bn.forward(x, Mode::train);
    for (std::size_t c = 0; c < 3; ++c) {
      double mean = 0, sq = 0;
      for (const auto& step : y) {
        for (std::size_t b = 0; b < step.rows(); ++b) mean += step(b, c);
      }
      mean /= 24.0;
      for (const auto& step : y) {
        for (std::size_t b = 0; b < step.rows(); ++b) sq += (step(b, c) - mean) * (step(b, c) - mean);
      }
      // population variance of the raw input, to undo the epsilon term
      double xm = 0, xv = 0;
      for (const auto& step : x) {
        for (std::size_t b = 0; b < step.rows(); ++b) xm += step(b, c);
      }
      xm /= 24.0;
      for (const auto& step : x) {
        for (std::size_t b = 0; b < step.rows(); ++b) xv += (step(b, c) - xm) * (step(b, c) - xm);
      }
      xv /= 24.0;
      CHECK(std::abs(mean) < 1e-9);
      CHECK(std::abs(sq / 24.0 * (xv + 0.001) / xv - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("dropout contracts") {
  std::mt19937_64 rng(5);
  const auto x = random_matrix<double>(4, 5, rng);
  CHECK(dropout(x, 0.4, Mode::infer, nullptr) == x);
  Rng stream(1);
  CHECK(dropout(x, 0.0, Mode::train, &stream) == x);

  Matrix<double> ones(1, 100000, 1.0);
  const auto y = dropout(ones, 0.4, Mode::train, &stream);
  double mean = 0;
  for (double v : y.values()) mean += v;
  mean /= 100000.0;
  // per-element sd = sqrt(p / (1 - p)) for inverted dropout
  const double se = std::sqrt(0.4 / 0.6) / std::sqrt(100000.0);
  CHECK(std::abs(mean - 1.0) < 3.0 * se);
}

TEST_CASE("global average pooling") {
  SequenceTensor<double> x(3, 2, {1, 4, 2, 5, 3, 6});
  const auto pooled = global_avg_pool(x);
  CHECK(pooled == std::vector<double>{2.0, 5.0});
  SequenceTensor<double> single(1, 3, {7, 8, 9});
  CHECK(global_avg_pool(single) == single.data);
  SequenceTensor<double> constant(4, 1, {2.5, 2.5, 2.5, 2.5});
  CHECK(global_avg_pool(constant)[0] == 2.5);
}

TEST_CASE("dimension shuffle") {
  SequenceTensor<double> window(12, 1);
  for (std::size_t t = 0; t < 12; ++t) window.at(t, 0) = 70.0 + static_cast<double>(t);
  const auto shuffled = dimension_shuffle(window);
  CHECK(shuffled.timesteps == 1);
  CHECK(shuffled.channels == 12);
  CHECK(dimension_shuffle(shuffled) == window);

  SequenceTensor<double> x(3, 2, {1, 2, 3, 4, 5, 6});
  const auto t = dimension_shuffle(x);
  CHECK(t.timesteps == 2);
  CHECK(t.data == std::vector<double>{1, 3, 5, 2, 4, 6});

  std::mt19937_64 rng(6);
  const auto batch = pulsegate::testing::random_sequence<double>(5, 3, 2, rng);
  CHECK(dimension_shuffle(dimension_shuffle(batch)) == batch);
}

TEST_CASE("loss worked examples") {
  const auto m = compute_loss(LossKind::mse, Matrix<double>::from_rows({{0.5}}), Matrix<double>::from_rows({{0.5}}));
  CHECK(m.value == 0.0);
  CHECK(m.grad(0, 0) == 0.0);
  const auto b =
      compute_loss(LossKind::binary_ce, Matrix<double>::from_rows({{0.5}}), Matrix<double>::from_rows({{1}}));
  CHECK(b.value == doctest::Approx(std::log(2.0)));
  const auto probs = softmax(Matrix<double>::from_rows({{0, 0}}));
  const auto c = compute_loss(LossKind::categorical_ce, probs, Matrix<double>::from_rows({{1, 0}}));
  CHECK(c.value == doctest::Approx(0.6931).epsilon(1e-4));
  CHECK_THROWS_AS(compute_loss(LossKind::mse, Matrix<double>(2, 1), Matrix<double>(1, 1)), Error);
}

TEST_CASE("saturated float probabilities keep the loss finite") {
  for (float p : {0.0f, 1.0f})
    for (float y : {0.0f, 1.0f}) {
      const auto b = compute_loss(LossKind::binary_ce, Matrix<float>::from_rows({{p}}), Matrix<float>::from_rows({{y}}));
      CHECK(std::isfinite(b.value));
      CHECK(std::isfinite(b.grad(0, 0)));
      const auto c = compute_loss(LossKind::categorical_ce, Matrix<float>::from_rows({{p, 1 - p}}),
                                  Matrix<float>::from_rows({{y, 1 - y}}));
      CHECK(std::isfinite(c.value));
    }
}

TEST_CASE("softmax") {
  const auto p = softmax<double>(std::vector<double>{0, 0});
  CHECK(p[0] == 0.5);
  const auto big = softmax<double>(std::vector<double>{1000, 0});
  CHECK(std::isfinite(big[0]));
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] < 1e-300);

  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const auto logits = random_matrix<double>(1, 5, rng, 20.0);
    const auto a = softmax<double>(logits.row(0));
    std::vector<double> shifted(logits.row(0).begin(), logits.row(0).end());
    for (auto& v : shifted) v += 123.25;
    const auto s = softmax<double>(shifted);
    double sum = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i] >= 0.0);
      CHECK(a[i] == doctest::Approx(s[i]).epsilon(1e-12));
      sum += a[i];
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

TEST_CASE("adam first step and zero gradient") {
  ParamBlock<double> block("w", 2, 3);
  block.value.fill(0.5);
  block.grad.fill(1.0);
  adam_step(block, AdamConfig{});
  for (double v : block.value.values()) CHECK(v == doctest::Approx(0.5 - 0.001 / (1.0 + 1e-8)).epsilon(1e-12));
  for (double g : block.grad.values()) CHECK(g == 0.0);
  CHECK(block.step_count == 1);

  ParamBlock<double> idle("w", 1, 2);
  idle.value.fill(0.25);
  adam_step(idle, AdamConfig{});
  for (double v : idle.value.values()) CHECK(v == 0.25);
  CHECK(idle.step_count == 1);

  ParamBlock<float> a("a", 2, 2), b("b", 2, 2);
  a.grad = b.grad = Matrix<float>::from_rows({{0.1f, -2.0f}, {3.0f, 0.0f}});
  adam_step(a, AdamConfig{});
  adam_step(b, AdamConfig{});
  CHECK(a.value == b.value);
}

TEST_CASE("finite difference checker sanity") {
  std::vector<double> w{3.0};
  std::vector<double> analytic{6.0};
  auto loss = [&] { return w[0] * w[0]; };
  std::vector<GradientProbe<double>> probes{{w, analytic}};
  CHECK(finite_difference_check<double>(loss, probes) < 1e-8);

  std::vector<double> doubled{12.0};
  std::vector<GradientProbe<double>> wrong{{w, doubled}};
  CHECK(finite_difference_check<double>(loss, wrong) == doctest::Approx(0.5).epsilon(1e-6));
}
