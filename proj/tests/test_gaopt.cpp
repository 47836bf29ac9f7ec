#include <cmath>
#include <random>

#include <json.hpp>

#include "doctest.h"
#include "pulsegate/error.hpp"
#include "pulsegate/gaopt.hpp"
#include "test_support.hpp"

using namespace pulsegate;
using namespace pulsegate::gaopt;
using models::Family;

namespace {

Gene bits_of(const std::string& s) {
  Gene g;
  for (char c : s)
    if (c == '0' || c == '1') g.bits.push_back(static_cast<std::uint8_t>(c - '0'));
  return g;
}

FitnessRecord rec(const std::string& hex, double perf, double latency, std::size_t size, bool div = false) {
  FitnessRecord r;
  r.gene = Gene::from_hex(hex);
  r.performance = perf;
  r.latency_ms = latency;
  r.size_bytes = size;
  r.diverged = div;
  return r;
}

ErrorKind kind_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error raised");
  return ErrorKind::IoError;
}

}  // namespace

TEST_CASE("gene decoding") {
  const auto spec = decode_gene(bits_of("01100100 10010100 01001010"), Family::mlp);
  CHECK(spec.layer_widths == std::vector<int>{100, 148, 74});
  CHECK(decode_gene(Gene::from_hex("00ff10"), Family::mlp).layer_widths == std::vector<int>{1, 255, 16});
  CHECK(decode_gene(Gene::from_hex("306c3414"), Family::lstm).layer_widths == std::vector<int>{48, 108, 52, 20});

  const auto lgb = models::gbdt_params(decode_gene(Gene::from_hex("0000ff"), Family::gbdt));
  CHECK(lgb.num_leaves == 2);
  CHECK(lgb.max_bin == 8);
  CHECK(lgb.learning_rate == doctest::Approx(0.3).epsilon(1e-15));
  const auto top = models::gbdt_params(decode_gene(Gene::from_hex("ffff00"), Family::gbdt));
  CHECK(top.num_leaves == 257);
  CHECK(top.max_bin == 263);
  CHECK(top.learning_rate == 0.005);

  CHECK(gene_width(Family::mlp) == 24);
  CHECK(gene_width(Family::lstm) == 32);
  CHECK(gene_width(Family::gbdt) == 24);
  CHECK(kind_of([] { decode_gene(Gene::from_hex("0102"), Family::mlp); }) == ErrorKind::WidthMismatch);
  CHECK(kind_of([] { decode_gene(Gene::from_hex("010203"), Family::lstm); }) == ErrorKind::WidthMismatch);
}

TEST_CASE("decode then encode is the identity on clamp-free genes") {
  std::mt19937_64 rng(11);
  for (auto family : {Family::mlp, Family::lstm, Family::lstm_fcn, Family::gbdt}) {
    for (int t = 0; t < 200; ++t) {
      Gene g;
      for (std::size_t i = 0; i < gene_width(family); ++i) g.bits.push_back(static_cast<std::uint8_t>(rng() & 1));
      const auto spec = decode_gene(g, family);
      if (family != Family::gbdt && std::count(spec.layer_widths.begin(), spec.layer_widths.end(), 1)) continue;
      CHECK(encode_gene(spec) == g);
      CHECK(Gene::from_hex(g.hex()) == g);
    }
  }
}

TEST_CASE("init population") {
  GaConfig cfg;
  cfg.seed = 5;
  const auto a = init_population(cfg, Family::lstm);
  CHECK(a.size() == 20);
  CHECK(a == init_population(cfg, Family::lstm));
  cfg.seed = 6;
  CHECK(a != init_population(cfg, Family::lstm));

  cfg.population_size = 10000;
  double ones = 0.0, total = 0.0;
  for (const auto& g : init_population(cfg, Family::mlp))
    for (auto b : g.bits) {
      ones += b;
      total += 1.0;
    }
  const double se = std::sqrt(0.25 / total);
  CHECK(std::abs(ones / total - 0.5) < 3 * se);

  cfg.population_size = 1;
  CHECK(kind_of([&] { cfg.validate(); }) == ErrorKind::BadSpec);
}

TEST_CASE("divergence gate") {
  const std::vector<double> rising{0.6, 0.5, 0.55, 0.6, 0.7, 0.8};
  const std::vector<double> falling{0.8, 0.7, 0.5, 0.4, 0.3, 0.2};
  CHECK(diverged(rising));
  CHECK_FALSE(diverged(falling));
  CHECK_FALSE(diverged(std::vector<double>{0.5, 0.5, 0.5}));
}

TEST_CASE("rank average worked example") {
  std::vector<FitnessRecord> r{rec("0a0000", 1.70, 0.30, 1500 * 1024), rec("0b0000", 1.55, 0.10, 200 * 1024),
                               rec("0c0000", 1.40, 0.05, 150 * 1024)};
  rank_average_fitness(r);
  CHECK(r[0].rank_avg == doctest::Approx(7.0 / 3.0));
  CHECK(r[1].rank_avg == doctest::Approx(2.0));
  CHECK(r[2].rank_avg == doctest::Approx(5.0 / 3.0));
  CHECK(std::abs(r[0].rank_avg - 2.33) < 0.005);
  CHECK(std::abs(r[2].rank_avg - 1.67) < 0.005);

  auto scaled = r;
  for (auto& x : scaled) x.latency_ms *= 1000.0;
  rank_average_fitness(scaled);
  for (std::size_t i = 0; i < r.size(); ++i) CHECK(scaled[i].rank_avg == r[i].rank_avg);

  std::vector<FitnessRecord> same{rec("01", 1, 1, 1), rec("02", 1, 1, 1), rec("03", 1, 1, 1)};
  rank_average_fitness(same);
  CHECK(same[0].rank_avg == 2.0);
  CHECK(same[1].rank_avg == same[2].rank_avg);

  std::vector<FitnessRecord> one{rec("01", 1, 1, 1)};
  rank_average_fitness(one);
  CHECK(one[0].rank_avg == 1.0);
}

TEST_CASE("rank average with divergence and duplicates") {
  std::vector<FitnessRecord> r{rec("01", 1.0, 1, 1), rec("02", 2.0, 0.5, 1, true), rec("01", 1.0, 1, 1),
                               rec("03", 0.5, 2, 2)};
  rank_average_fitness(r);
  CHECK(r[1].rank_avg == 5.0);
  CHECK(r[0].rank_avg == 1.0);
  CHECK(r[2].rank_avg == 1.0);
  CHECK(r[3].rank_avg == 2.0);

  std::vector<FitnessRecord> dead{rec("01", 1, 1, 1, true), rec("02", 1, 1, 1, true)};
  CHECK(kind_of([&] { rank_average_fitness(dead); }) == ErrorKind::AllDiverged);
}

TEST_CASE("roulette selection") {
  std::vector<FitnessRecord> r{rec("01", 0, 0, 0), rec("02", 0, 0, 0)};
  r[0].rank_avg = 1.0;
  r[1].rank_avg = 3.0;
  const auto w = roulette_weights(r);
  CHECK(w == std::vector<double>{3.0, 1.0});

  Rng rng(7);
  const int draws = 100000;
  int first = 0;
  for (int i = 0; i < draws; ++i) first += roulette_select(r, rng) == 0;
  const double se = std::sqrt(0.75 * 0.25 / draws);
  CHECK(std::abs(first / static_cast<double>(draws) - 0.75) < 3 * se);

  r[1].rank_avg = 1.0;
  CHECK(roulette_weights(r) == std::vector<double>{1.0, 1.0});
}

TEST_CASE("crossover") {
  const auto a = bits_of("11111111 11111111 11111111");
  const auto b = bits_of("00000000 00000000 00000000");
  const auto [x, y] = crossover_at(a, b, 8);
  CHECK(x == bits_of("11111111 00000000 00000000"));
  CHECK(y == bits_of("00000000 11111111 11111111"));

  Rng rng(3);
  const auto [p, q] = crossover(a, b, 0.0, rng);
  CHECK(p == a);
  CHECK(q == b);

  std::mt19937_64 gen(9);
  for (int t = 0; t < 100; ++t) {
    Gene u, v;
    for (int i = 0; i < 32; ++i) {
      u.bits.push_back(static_cast<std::uint8_t>(gen() & 1));
      v.bits.push_back(static_cast<std::uint8_t>(gen() & 1));
    }
    const auto [c, d] = crossover(u, v, 1.0, rng);
    for (std::size_t i = 0; i < 32; ++i) CHECK(c.bits[i] + d.bits[i] == u.bits[i] + v.bits[i]);
  }
  CHECK(kind_of([&] { crossover(a, Gene::from_hex("00"), 1.0, rng); }) == ErrorKind::WidthMismatch);
}

TEST_CASE("mutation") {
  Rng rng(4);
  const auto g = Gene::from_hex("a5c3f00f");
  CHECK(mutate(g, 0.0, rng) == g);
  auto flipped = mutate(g, 1.0, rng);
  for (std::size_t i = 0; i < g.width(); ++i) CHECK(flipped.bits[i] == 1 - g.bits[i]);

  const int trials = 100000;
  double sum = 0.0;
  for (int t = 0; t < trials; ++t) {
    const auto m = mutate(g, 0.02, rng);
    double flips = 0.0;
    for (std::size_t i = 0; i < g.width(); ++i) flips += m.bits[i] != g.bits[i];
    sum += flips;
  }
  const double mean = sum / trials;
  const double se = std::sqrt(32 * 0.02 * 0.98 / trials);
  CHECK(std::abs(mean - 0.64) < 3 * se);
}

TEST_CASE("surrogate search") {
  GaConfig cfg;
  cfg.seed = 1;
  const auto evaluate = surrogate_evaluator(Family::mlp, {100, 100, 100});
  const auto result = run_ga(Family::mlp, evaluate, cfg);
  CHECK(result.history.size() == 15);
  for (const auto& gen : result.history) CHECK(gen.size() == 20);
  double prev = 1e9;
  for (const auto& gen : result.history) {
    double best = 1e9;
    for (const auto& r : gen) best = std::min(best, r.rank_avg);
    CHECK(best <= prev);
    prev = best;
  }
  CHECK(run_ga(Family::mlp, evaluate, cfg).best.gene == result.best.gene);

  const auto lines = history_jsonl(result);
  CHECK(std::count(lines.begin(), lines.end(), '\n') == 300);
  const auto first = nlohmann::json::parse(lines.substr(0, lines.find('\n')));
  CHECK(first.contains("gene"));
  CHECK(first.contains("rank_avg"));
  CHECK(first["spec"]["family"] == "mlp");

  CHECK(kind_of([] { surrogate_evaluator(Family::lstm, {1, 2, 3}); }) == ErrorKind::WidthMismatch);
}

TEST_CASE("all-diverged search fails") {
  GaConfig cfg;
  cfg.generations = 2;
  cfg.population_size = 4;
  const BatchEvaluator dead = [](const std::vector<Gene>& genes, int) {
    std::vector<FitnessRecord> out(genes.size());
    for (std::size_t i = 0; i < genes.size(); ++i) {
      out[i].gene = genes[i];
      out[i].diverged = true;
    }
    return out;
  };
  CHECK(kind_of([&] { run_ga(Family::mlp, dead, cfg); }) == ErrorKind::AllDiverged);
}

TEST_CASE("real candidate evaluation") {
  const auto train_set = pulsegate::testing::toy_dataset(120, 1, 20.0, 1);
  const auto val_set = pulsegate::testing::toy_dataset(60, 1, 20.0, 2);
  const SearchData data{train_set, val_set};
  GaConfig cfg;
  cfg.candidate_epochs = 4;
  cfg.latency_repeats = 2;
  const auto gene = Gene::from_hex("080808");
  const auto a = evaluate_candidate(gene, Family::mlp, data, cfg, 42);
  const auto b = evaluate_candidate(gene, Family::mlp, data, cfg, 42);
  CHECK(a.spec.layer_widths == std::vector<int>{8, 8, 8});
  CHECK(a.performance == b.performance);
  CHECK(a.size_bytes == b.size_bytes);
  CHECK(a.diverged == b.diverged);
  if (!a.diverged) {
    CHECK(a.latency_ms > 0.0);
    CHECK(a.performance >= 0.0);
    CHECK(a.performance <= 2.0);
    CHECK(a.size_bytes > models::serialize(models::build(a.spec)).size());
  }

  cfg.population_size = 3;
  cfg.generations = 2;
  cfg.seed = 3;
  const auto result = run_ga(Family::gbdt, data, cfg);
  CHECK(result.history.size() == 2);
  CHECK_FALSE(result.best.diverged);
}
