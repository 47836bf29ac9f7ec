#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "pulsegate/boosting.hpp"
#include "pulsegate/error.hpp"

using namespace pulsegate;
using namespace pulsegate::boosting;

namespace {

Matrix<double> column(std::initializer_list<double> xs) {
  Matrix<double> m(xs.size(), 1);
  std::size_t i = 0;
  for (double v : xs) m(i++, 0) = v;
  return m;
}

GbdtModel four_point(double lr = 1.0) {
  const auto x = column({1, 2, 3, 4});
  const std::vector<int> y{0, 0, 1, 1};
  GbdtParams p;
  p.num_leaves = 2;
  p.n_trees = 1;
  p.learning_rate = lr;
  p.max_bin = 255;
  return fit(x.view(), y, p, kernels::Backend::serial);
}

double at(const GbdtModel& m, double v) { return predict_gbdt(m, std::span<const double>(&v, 1)); }

struct RandomSet {
  Matrix<double> x;
  std::vector<int> y;
};

RandomSet random_set(std::size_t n, std::size_t features, std::mt19937_64& rng, bool integer_valued) {
  RandomSet s{Matrix<double>(n, features), std::vector<int>(n)};
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  std::uniform_int_distribution<int> k(0, 9);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t f = 0; f < features; ++f) s.x(i, f) = integer_valued ? k(rng) : u(rng);
    std::bernoulli_distribution b(1.0 / (1.0 + std::exp(-2.0 * s.x(i, 0))));
    s.y[i] = b(rng);
  }
  s.y[0] = 0;
  s.y[1] = 1;
  return s;
}

}  // namespace

TEST_CASE("quantile bins") {
  const auto x = column({8, 3, 1, 6, 2, 7, 5, 4});
  const auto map = build_bins(x.view(), 4);
  REQUIRE(map.cuts[0].size() == 3);
  CHECK(map.cuts[0][0] == 2.5);
  CHECK(map.cuts[0][1] == 4.5);
  CHECK(map.cuts[0][2] == 6.5);
  CHECK(map.bin(0, 2.0) == 0);
  CHECK(map.bin(0, 2.5) == 0);
  CHECK(map.bin(0, 3.0) == 1);
  CHECK(map.bin(0, 100.0) == 3);

  const auto constant = column({5, 5, 5, 5});
  CHECK(build_bins(constant.view(), 4).cuts[0].empty());
  CHECK(build_bins(constant.view(), 4).bin_count(0) == 1);

  const auto few = column({1, 3, 3, 2, 1});
  const auto every = build_bins(few.view(), 8);
  CHECK(every.bin_count(0) == 3);
  CHECK(every.cuts[0] == std::vector<double>{1.5, 2.5});
}

TEST_CASE("quantile bins collapse duplicates and respect max_bin") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto s = random_set(200, 3, rng, trial % 2 == 0);
    for (int max_bin : {2, 3, 5, 16, 64}) {
      const auto map = build_bins(s.x.view(), max_bin);
      for (const auto& cuts : map.cuts) {
        CHECK(cuts.size() + 1 <= static_cast<std::size_t>(max_bin));
        CHECK(std::adjacent_find(cuts.begin(), cuts.end(), std::greater_equal<double>()) == cuts.end());
      }
    }
  }
}

TEST_CASE("four-point Newton step") {
  const auto m = four_point();
  REQUIRE(m.trees.size() == 1);
  CHECK(m.init_score == 0.0);
  const auto& root = m.trees[0].nodes[0];
  REQUIRE_FALSE(root.is_leaf());
  CHECK(m.bins.cuts[0][root.bin_threshold] == 2.5);
  CHECK(m.trees[0].nodes[static_cast<std::size_t>(root.left)].value == doctest::Approx(-2.0));
  CHECK(m.trees[0].nodes[static_cast<std::size_t>(root.right)].value == doctest::Approx(2.0));
  // sigmoid(-2) and sigmoid(2)
  CHECK(at(m, 1.0) == doctest::Approx(1.0 / (1.0 + std::exp(2.0))));
  CHECK(at(m, 1.0) == doctest::Approx(0.119).epsilon(0.01));
  CHECK(at(m, 4.0) == doctest::Approx(0.881).epsilon(0.01));
  CHECK(at(m, 1.0) == at(m, 1.0));
}

TEST_CASE("learning rate zero predicts the base rate") {
  const auto x = column({1, 2, 3, 4, 5, 6, 7, 8, 9, 10});
  const std::vector<int> y{0, 0, 0, 1, 0, 1, 0, 0, 1, 0};
  GbdtParams p;
  p.learning_rate = 0.0;
  p.n_trees = 5;
  const auto m = fit(x.view(), y, p);
  for (double v : {0.0, 3.0, 11.0}) CHECK(at(m, v) == doctest::Approx(0.3));
}

TEST_CASE("zero-tree model predicts the base rate") {
  GbdtModel m;
  m.bins.cuts.resize(1);
  m.init_score = std::log(0.3 / 0.7);
  CHECK(at(m, 42.0) == doctest::Approx(0.3));
}

TEST_CASE("pure regions push log-odds in the right direction") {
  const auto x = column({1, 2, 3, 10, 11, 12, 13});
  const std::vector<int> y{1, 1, 1, 0, 0, 0, 0};
  GbdtParams p;
  p.num_leaves = 2;
  p.n_trees = 1;
  const auto m = fit(x.view(), y, p);
  CHECK(predict_raw(m, std::vector<double>{2.0}) > m.init_score);
  CHECK(predict_raw(m, std::vector<double>{12.0}) < m.init_score);
}

TEST_CASE("single class is rejected") {
  const auto x = column({1, 2, 3});
  CHECK_THROWS_AS(fit(x.view(), std::vector<int>{1, 1, 1}, GbdtParams{}), Error);
  try {
    fit(x.view(), std::vector<int>{0, 0, 0}, GbdtParams{});
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::SingleClass);
  }
}

TEST_CASE("chosen stump split matches brute-force enumeration") {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 64; ++trial) {
    const std::size_t n = 4 + static_cast<std::size_t>(trial) % 61;
    auto s = random_set(n, 1, rng, trial % 3 == 0);
    GbdtParams p;
    p.num_leaves = 2;
    p.n_trees = 1;
    p.learning_rate = 1.0;
    p.max_bin = static_cast<int>(n) + 1;
    const auto m = fit(s.x.view(), s.y, p, kernels::Backend::serial);

    // oracle: every boundary between distinct sorted values
    const double base = std::accumulate(s.y.begin(), s.y.end(), 0.0) / static_cast<double>(n);
    const double g0 = base, h0 = base * (1.0 - base);
    std::vector<double> xs(s.x.values().begin(), s.x.values().end());
    std::sort(xs.begin(), xs.end());
    xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
    std::vector<double> cut_gain, cut_at, cut_left;
    double best_gain = 0.0;
    for (std::size_t k = 0; k + 1 < xs.size(); ++k) {
      double gl = 0, hl = 0, gr = 0, hr = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double g = g0 - s.y[i];
        (s.x(i, 0) <= xs[k] ? gl : gr) += g;
        (s.x(i, 0) <= xs[k] ? hl : hr) += h0;
      }
      cut_gain.push_back(gl * gl / hl + gr * gr / hr - (gl + gr) * (gl + gr) / (hl + hr));
      cut_at.push_back((xs[k] + xs[k + 1]) / 2);
      cut_left.push_back(-gl / hl);
      best_gain = std::max(best_gain, cut_gain.back());
    }
    const auto& root = m.trees[0].nodes[0];
    if (best_gain <= 1e-12) {
      CHECK(root.is_leaf());
      continue;
    }
    REQUIRE_FALSE(root.is_leaf());
    const double chosen = m.bins.cuts[0][root.bin_threshold];
    const auto k = static_cast<std::size_t>(std::find_if(cut_at.begin(), cut_at.end(), [&](double c) { return std::abs(c - chosen) <= 1e-12 * (1 + std::abs(c)); }) - cut_at.begin());
    REQUIRE(k < cut_at.size());
    CHECK(cut_gain[k] == doctest::Approx(best_gain).epsilon(1e-12));
    CHECK(m.trees[0].nodes[static_cast<std::size_t>(root.left)].value == doctest::Approx(cut_left[k]));
  }
}

TEST_CASE("training loss is non-increasing and leaves are bounded") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 5; ++trial) {
    auto s = random_set(300, 12, rng, false);
    GbdtParams p;
    p.num_leaves = 3 + trial * 4;
    p.max_bin = 16 + trial * 20;
    p.learning_rate = 0.1 + 0.1 * trial;
    p.n_trees = 30;
    const auto m = fit(s.x.view(), s.y, p);
    REQUIRE(m.train_loss.size() == 31);
    for (std::size_t t = 1; t < m.train_loss.size(); ++t) CHECK(m.train_loss[t] <= m.train_loss[t - 1] + 1e-12);
    for (const auto& tree : m.trees) CHECK(tree.leaf_count() <= static_cast<std::size_t>(p.num_leaves));
  }
}

TEST_CASE("fit is invariant to row order and backend") {
  std::mt19937_64 rng(5);
  auto s = random_set(400, 12, rng, false);
  GbdtParams p;
  p.num_leaves = 8;
  p.max_bin = 32;
  p.n_trees = 20;
  const auto ref = fit(s.x.view(), s.y, p, kernels::Backend::serial);

  std::vector<std::size_t> perm(s.y.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  Matrix<double> xp(s.x.rows(), s.x.cols());
  std::vector<int> yp(s.y.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    std::copy_n(s.x.row(perm[i]).begin(), s.x.cols(), xp.row(i).begin());
    yp[i] = s.y[perm[i]];
  }
  const auto shuffled = fit(xp.view(), yp, p, kernels::Backend::serial);
  const auto parallel = fit(s.x.view(), s.y, p, kernels::Backend::parallel);
  for (std::size_t i = 0; i < s.y.size(); ++i) {
    const double r = predict_gbdt(ref, s.x.row(i));
    CHECK(predict_gbdt(shuffled, s.x.row(i)) == r);
    CHECK(predict_gbdt(parallel, s.x.row(i)) == r);
  }
  CHECK(ref.train_loss == shuffled.train_loss);
}

TEST_CASE("gbdt serialization round trip") {
  const auto m = four_point();
  int horizon = 0;
  const auto bytes = serialize_gbdt(m, 4);
  const auto back = deserialize_gbdt(bytes, &horizon);
  CHECK(horizon == 4);
  CHECK(back.params == m.params);
  for (double v : {0.0, 1.0, 2.5, 3.0, 9.0}) CHECK(at(back, v) == at(m, v));

  std::mt19937_64 rng(3);
  auto s = random_set(300, 12, rng, false);
  GbdtParams p;
  p.num_leaves = 10;
  p.n_trees = 15;
  const auto big = fit(s.x.view(), s.y, p);
  const auto big_back = deserialize_gbdt(serialize_gbdt(big, 1));
  for (std::size_t i = 0; i < s.y.size(); ++i) CHECK(predict_gbdt(big_back, s.x.row(i)) == predict_gbdt(big, s.x.row(i)));

  GbdtModel empty;
  empty.bins.cuts.resize(12);
  empty.init_score = -0.5;
  const auto empty_back = deserialize_gbdt(serialize_gbdt(empty, 1));
  CHECK(empty_back.trees.empty());
  CHECK(empty_back.init_score == -0.5);

  auto corrupt = bytes;
  corrupt[corrupt.size() - 10] ^= std::byte{0x40};
  try {
    deserialize_gbdt(corrupt);
    FAIL("corruption not detected");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ChecksumMismatch);
  }
}
