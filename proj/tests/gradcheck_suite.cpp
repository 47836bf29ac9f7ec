#include "gradcheck_suite.hpp"

#include <algorithm>
#include <random>

#include "pulsegate/nncore.hpp"
#include "test_support.hpp"

namespace pulsegate::testing {
namespace {

using namespace pulsegate::nn;
using Probes = std::vector<GradientProbe<double>>;

double check(const std::function<double()>& loss, const Probes& probes) {
  return finite_difference_check<double>(loss, probes, 1e-5);
}

double dense_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Activation acts[] = {Activation::relu, Activation::tanh, Activation::sigmoid, Activation::linear};
  Dense<double> layer("d", 4, 3, acts[seed % 4]);
  randomize(layer.weight, rng);
  randomize(layer.bias, rng);
  auto x = random_matrix<double>(5, 4, rng);
  const auto r = random_matrix<double>(5, 3, rng);

  DenseCache<double> cache;
  layer.forward(x, &cache);
  const auto dx = layer.backward(cache, r);
  auto loss = [&] { return weighted_sum(layer.forward(x), r); };
  return check(loss, {probe(layer.weight), probe(layer.bias), probe(x, dx)});
}

double lstm_case(std::uint64_t seed, ReturnMode mode, std::size_t steps) {
  std::mt19937_64 rng(seed);
  const std::size_t in = mode == ReturnMode::full_sequence ? 1 + seed % 2 : 1;
  const std::size_t hidden = mode == ReturnMode::full_sequence ? 2 + seed % 3 : 3;
  Lstm<double> layer("l", in, hidden);
  randomize(layer.kernel, rng);
  randomize(layer.recurrent, rng);
  randomize(layer.bias, rng);
  auto x = random_sequence<double>(steps, 3, in, rng);
  const auto r = random_sequence<double>(mode == ReturnMode::full_sequence ? steps : 1, 3, hidden, rng);

  LstmCache<double> cache;
  layer.forward(x, mode, &cache);
  const auto dx = layer.backward(cache, r);
  auto loss = [&] { return weighted_sum(layer.forward(x, mode), r); };
  Probes probes{probe(layer.kernel), probe(layer.recurrent), probe(layer.bias)};
  for (std::size_t t = 0; t < x.size(); ++t) probes.push_back(probe(x[t], dx[t]));
  return check(loss, probes);
}

double conv_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t in = 1 + seed % 3;
  const std::size_t stride = 1 + seed % 3;
  Conv1d<double> layer("c", in, 4, 3, stride);
  randomize(layer.weight, rng);
  randomize(layer.bias, rng);
  auto x = random_sequence<double>(12, 2, in, rng);
  const std::size_t out_len = Conv1d<double>::output_length(12, 3, stride);
  const auto r = random_sequence<double>(out_len, 2, 4, rng);

  Conv1dCache<double> cache;
  layer.forward(x, &cache);
  const auto dx = layer.backward(cache, r);
  auto loss = [&] { return weighted_sum(layer.forward(x), r); };
  Probes probes{probe(layer.weight), probe(layer.bias)};
  for (std::size_t t = 0; t < x.size(); ++t) probes.push_back(probe(x[t], dx[t]));
  return check(loss, probes);
}

double batchnorm_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  BatchNorm<double> layer("bn", 3);
  randomize(layer.gamma, rng, 1.5);
  randomize(layer.beta, rng);
  auto x = random_sequence<double>(4, 5, 3, rng, 2.0);
  const auto r = random_sequence<double>(4, 5, 3, rng);

  BatchNormCache<double> cache;
  layer.forward(x, Mode::train, &cache);
  const auto dx = layer.backward(cache, r);
  auto loss = [&] { return weighted_sum(layer.forward(x, Mode::train), r); };
  Probes probes{probe(layer.gamma), probe(layer.beta)};
  for (std::size_t t = 0; t < x.size(); ++t) probes.push_back(probe(x[t], dx[t]));
  return check(loss, probes);
}

double loss_case(LossKind kind, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> prob(0.05, 0.95);
  std::bernoulli_distribution coin(0.5);
  const std::size_t cols = kind == LossKind::categorical_ce ? 3 : 1;
  Matrix<double> pred(6, cols);
  Matrix<double> target(6, cols);
  for (std::size_t r = 0; r < 6; ++r) {
    for (std::size_t c = 0; c < cols; ++c) pred(r, c) = prob(rng);
    if (kind == LossKind::categorical_ce) {
      target(r, r % cols) = 1.0;
    } else if (kind == LossKind::binary_ce) {
      target(r, 0) = coin(rng) ? 1.0 : 0.0;
    } else {
      target(r, 0) = prob(rng);
    }
  }
  const auto analytic = compute_loss(kind, pred, target).grad;
  auto loss = [&] { return compute_loss(kind, pred, target).value; };
  return check(loss, {probe(pred, analytic)});
}

double softmax_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto logits = random_matrix<double>(4, 3, rng, 2.0);
  Matrix<double> target(4, 3);
  for (std::size_t r = 0; r < 4; ++r) target(r, (r + seed) % 3) = 1.0;
  const auto probs = softmax(logits);
  const auto dz = softmax_backward(probs, compute_loss(LossKind::categorical_ce, probs, target).grad);
  auto loss = [&] { return compute_loss(LossKind::categorical_ce, softmax(logits), target).value; };
  return check(loss, {probe(logits, dz)});
}

double pool_case(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto x = random_sequence<double>(5, 3, 4, rng);
  const auto r = random_matrix<double>(3, 4, rng);
  const auto dx = global_avg_pool_backward(r, x.size());
  auto loss = [&] { return weighted_sum(global_avg_pool(x), r); };
  Probes probes;
  for (std::size_t t = 0; t < x.size(); ++t) probes.push_back(probe(x[t], dx[t]));
  return check(loss, probes);
}

}  // namespace

std::vector<GradCheckResult> run_gradient_checks(int seeds) {
  struct Case {
    std::string name;
    std::function<double(std::uint64_t)> run;
  };
  const std::vector<Case> cases = {
      {"dense", dense_case},
      {"lstm (BPTT, 12 steps)", [](std::uint64_t s) { return lstm_case(s, ReturnMode::full_sequence, 12); }},
      {"lstm last_state (5 steps)", [](std::uint64_t s) { return lstm_case(s, ReturnMode::last_state, 5); }},
      {"conv1d", conv_case},
      {"batchnorm", batchnorm_case},
      {"loss mse", [](std::uint64_t s) { return loss_case(LossKind::mse, s); }},
      {"loss binary_ce", [](std::uint64_t s) { return loss_case(LossKind::binary_ce, s); }},
      {"loss categorical_ce", [](std::uint64_t s) { return loss_case(LossKind::categorical_ce, s); }},
      {"softmax + categorical_ce", softmax_case},
      {"global_avg_pool", pool_case},
  };
  std::vector<GradCheckResult> results;
  for (const auto& c : cases) {
    GradCheckResult result{c.name, seeds, 0.0};
    for (int s = 0; s < seeds; ++s) {
      result.worst_relative_error = std::max(result.worst_relative_error, c.run(1000 + static_cast<std::uint64_t>(s)));
    }
    results.push_back(result);
  }
  return results;
}

}  // namespace pulsegate::testing
