#include "pulsegate/gaopt.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>

#include <omp.h>

#include <json.hpp>

#include "pulsegate/error.hpp"
#include "pulsegate/eval.hpp"
#include "pulsegate/kernels.hpp"

namespace pulsegate::gaopt {

namespace {

constexpr double kLrLow = 0.005;
constexpr double kLrHigh = 0.3;

std::vector<int> raw_groups(const Gene& gene) {
  std::vector<int> out;
  for (std::size_t g = 0; g < gene.width() / kBitsPerParameter; ++g) {
    int v = 0;
    for (std::size_t b = 0; b < kBitsPerParameter; ++b) v = (v << 1) | gene.bits[g * kBitsPerParameter + b];
    out.push_back(v);
  }
  return out;
}

Gene from_groups(const std::vector<int>& raw) {
  Gene gene;
  for (int v : raw)
    for (int b = static_cast<int>(kBitsPerParameter) - 1; b >= 0; --b) gene.bits.push_back((v >> b) & 1);
  return gene;
}

void require_width(const Gene& gene, std::size_t width) {
  if (gene.width() != width)
    throw Error(ErrorKind::WidthMismatch,
                "gene has " + std::to_string(gene.width()) + " bits, expected " + std::to_string(width));
}

int raw_byte(double v, const char* what) {
  const auto r = std::lround(v);
  if (r < 0 || r > 255 || std::abs(v - static_cast<double>(r)) > 1e-9)
    throw Error(ErrorKind::BadSpec, std::string(what) + " is not representable in a gene");
  return static_cast<int>(r);
}

/// Tied ranks averaged; `better(a, b)` orders rank 1 first.
template <typename Key, typename Better>
std::vector<double> tied_ranks(const std::vector<Key>& keys, Better better) {
  std::vector<std::size_t> order(keys.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return better(keys[a], keys[b]); });
  std::vector<double> ranks(keys.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && !better(keys[order[i]], keys[order[j]]) && !better(keys[order[j]], keys[order[i]])) ++j;
    const double mean = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = mean;
    i = j;
  }
  return ranks;
}

/// False when every record diverged; ranks are then all population + 1.
bool assign_ranks(std::vector<FitnessRecord>& records) {
  const double worst = static_cast<double>(records.size() + 1);
  std::map<std::vector<std::uint8_t>, std::size_t> group_of;
  std::vector<std::size_t> representative;
  std::vector<std::size_t> group(records.size(), 0);
  for (std::size_t i = 0; i < records.size(); ++i) {
    records[i].rank_avg = worst;
    if (records[i].diverged) continue;
    auto [it, fresh] = group_of.emplace(records[i].gene.bits, representative.size());
    if (fresh) representative.push_back(i);
    group[i] = it->second;
  }
  if (representative.empty()) return false;

  std::vector<double> perf, latency, size;
  for (auto r : representative) {
    perf.push_back(records[r].performance);
    latency.push_back(records[r].latency_ms);
    size.push_back(static_cast<double>(records[r].size_bytes));
  }
  const auto rp = tied_ranks(perf, std::greater<>());
  const auto rl = tied_ranks(latency, std::less<>());
  const auto rs = tied_ranks(size, std::less<>());
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].diverged) continue;
    const auto g = group[i];
    records[i].rank_avg = (rp[g] + rl[g] + rs[g]) / 3.0;
  }
  return true;
}

}  // namespace

std::string Gene::hex() const {
  std::string out;
  char buf[3];
  for (int v : raw_groups(*this)) {
    std::snprintf(buf, sizeof buf, "%02x", v);
    out += buf;
  }
  return out;
}

Gene Gene::from_hex(std::string_view hex) {
  if (hex.size() % 2) throw Error(ErrorKind::BadSpec, "gene hex needs an even number of digits");
  std::vector<int> raw;
  for (std::size_t i = 0; i < hex.size(); i += 2) {
    const std::string pair(hex.substr(i, 2));
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(pair, &used, 16);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != 2) throw Error(ErrorKind::BadSpec, "bad gene hex '" + std::string(hex) + "'");
    raw.push_back(v);
  }
  return from_groups(raw);
}

std::size_t gene_width(models::Family family) {
  switch (family) {
    case models::Family::mlp:
    case models::Family::gbdt: return 3 * kBitsPerParameter;
    case models::Family::lstm:
    case models::Family::lstm_fcn: return 4 * kBitsPerParameter;
  }
  return 0;
}

models::ModelSpec decode_gene(const Gene& gene, models::Family family) {
  require_width(gene, gene_width(family));
  const auto raw = raw_groups(gene);
  if (family == models::Family::gbdt) {
    boosting::GbdtParams p;
    p.num_leaves = 2 + raw[0];
    p.max_bin = 8 + raw[1];
    p.learning_rate = kLrLow + raw[2] * (kLrHigh - kLrLow) / 255.0;
    return models::gbdt_spec(p);
  }
  auto spec = models::reference_spec(family);
  spec.layer_widths.clear();
  for (int v : raw) spec.layer_widths.push_back(std::max(v, 1));
  return spec;
}

Gene encode_gene(const models::ModelSpec& spec) {
  if (spec.family == models::Family::gbdt) {
    const auto p = models::gbdt_params(spec);
    return from_groups({raw_byte(p.num_leaves - 2, "num_leaves"), raw_byte(p.max_bin - 8, "max_bin"),
                        raw_byte((p.learning_rate - kLrLow) * 255.0 / (kLrHigh - kLrLow), "learning_rate")});
  }
  if (spec.layer_widths.size() * kBitsPerParameter != gene_width(spec.family))
    throw Error(ErrorKind::BadSpec, "spec has the wrong number of widths for its family");
  std::vector<int> raw;
  for (int w : spec.layer_widths) raw.push_back(raw_byte(w, "layer width"));
  return from_groups(raw);
}

void GaConfig::validate() const {
  if (population_size < 2) throw Error(ErrorKind::BadSpec, "population must be >= 2");
  if (generations < 1) throw Error(ErrorKind::BadSpec, "generations must be >= 1");
  for (double p : {crossover_prob, mutation_prob_per_bit})
    if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorKind::BadSpec, "probabilities must lie in [0, 1]");
  if (elite_count < 0 || elite_count > population_size)
    throw Error(ErrorKind::BadSpec, "elite_count must lie in [0, population]");
  if (candidate_epochs < 2) throw Error(ErrorKind::BadSpec, "candidate_epochs must be >= 2");
  if (latency_repeats < 1 || latency_warmup < 0) throw Error(ErrorKind::BadSpec, "bad latency repeats");
}

std::vector<Gene> init_population(const GaConfig& config, models::Family family) {
  config.validate();
  Rng rng(derive_seed(config.seed, "init_population"));
  std::bernoulli_distribution coin(0.5);
  std::vector<Gene> out(static_cast<std::size_t>(config.population_size));
  for (auto& gene : out) {
    gene.bits.resize(gene_width(family));
    for (auto& b : gene.bits) b = coin(rng);
  }
  return out;
}

bool diverged(std::span<const double> losses) {
  if (losses.size() < 2) return false;
  const std::size_t n = losses.size();
  return (losses[0] + losses[1]) / 2.0 < (losses[n - 2] + losses[n - 1]) / 2.0;
}

FitnessRecord train_candidate(const Gene& gene, models::Family family, const SearchData& data, const GaConfig& config,
                              std::uint64_t stream_seed, models::TrainedModel* trained) {
  FitnessRecord rec;
  rec.gene = gene;
  rec.spec = decode_gene(gene, family);
  auto cfg = models::TrainConfig::defaults(family);
  if (family != models::Family::gbdt) cfg.epochs = config.candidate_epochs;
  cfg.shuffle_seed = stream_seed;
  models::TrainedModel model;
  try {
    model = models::train(models::build(rec.spec, stream_seed), data.train, {}, cfg);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::NonFiniteLoss) throw;
    rec.diverged = true;
    return rec;
  }
  if (diverged(model.train_log)) {
    rec.diverged = true;
    return rec;
  }
  const auto scored = eval::score(model, data.val, kernels::Backend::serial);
  const auto op = eval::threshold_at_sensitivity(scored, 0.85);
  rec.performance = op.accuracy + op.specificity;
  rec.size_bytes = models::serialize(model).size();
  if (trained) *trained = std::move(model);
  return rec;
}

FitnessRecord evaluate_candidate(const Gene& gene, models::Family family, const SearchData& data,
                                 const GaConfig& config, std::uint64_t stream_seed) {
  models::TrainedModel model;
  auto rec = train_candidate(gene, family, data, config, stream_seed, &model);
  if (rec.diverged) return rec;
  rec.latency_ms = eval::measure_latency(model, data.val, config.latency_repeats, config.latency_warmup).mean_latency_ms;
  return rec;
}

void rank_average_fitness(std::vector<FitnessRecord>& records) {
  if (!assign_ranks(records)) throw Error(ErrorKind::AllDiverged, "every candidate diverged");
}

std::vector<double> roulette_weights(std::span<const FitnessRecord> records) {
  double worst = -std::numeric_limits<double>::infinity();
  for (const auto& r : records) worst = std::max(worst, r.rank_avg);
  std::vector<double> w;
  for (const auto& r : records) w.push_back(worst - r.rank_avg + 1.0);
  return w;
}

std::size_t roulette_select(std::span<const FitnessRecord> records, Rng& rng) {
  const auto w = roulette_weights(records);
  std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
  return pick(rng);
}

std::pair<Gene, Gene> crossover_at(const Gene& a, const Gene& b, std::size_t cut) {
  require_width(b, a.width());
  if (cut > a.width()) throw Error(ErrorKind::WidthMismatch, "cut point beyond gene width");
  Gene x = a, y = b;
  std::swap_ranges(x.bits.begin() + static_cast<std::ptrdiff_t>(cut), x.bits.end(),
                   y.bits.begin() + static_cast<std::ptrdiff_t>(cut));
  return {x, y};
}

std::pair<Gene, Gene> crossover(const Gene& a, const Gene& b, double prob, Rng& rng) {
  require_width(b, a.width());
  std::bernoulli_distribution happen(prob);
  if (a.width() < 2 || !happen(rng)) return {a, b};
  std::uniform_int_distribution<std::size_t> cut(1, a.width() - 1);
  return crossover_at(a, b, cut(rng));
}

Gene mutate(Gene gene, double prob_per_bit, Rng& rng) {
  std::bernoulli_distribution flip(prob_per_bit);
  for (auto& b : gene.bits)
    if (flip(rng)) b ^= 1;
  return gene;
}

GaResult run_ga(models::Family family, const BatchEvaluator& evaluate, const GaConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.seed, "ga_selection"));
  auto population = init_population(config, family);
  GaResult result;
  bool found = false;
  const auto pop = static_cast<std::size_t>(config.population_size);

  for (int g = 0; g < config.generations; ++g) {
    auto records = evaluate(population, g);
    if (records.size() != pop) throw Error(ErrorKind::ShapeMismatch, "evaluator returned the wrong record count");
    for (std::size_t i = 0; i < records.size(); ++i) {
      records[i].generation = g;
      records[i].index = static_cast<int>(i);
    }
    assign_ranks(records);
    for (const auto& r : records) {
      if (r.diverged) continue;
      if (!found || r.rank_avg < result.best.rank_avg ||
          (r.rank_avg == result.best.rank_avg && r.generation > result.best.generation)) {
        result.best = r;
        found = true;
      }
    }
    result.history.push_back(records);
    if (g + 1 == config.generations) break;

    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return records[a].rank_avg < records[b].rank_avg; });
    std::vector<Gene> next;
    for (int e = 0; e < config.elite_count; ++e) next.push_back(records[order[static_cast<std::size_t>(e)]].gene);
    while (next.size() < pop) {
      const auto& pa = records[roulette_select(records, rng)].gene;
      const auto& pb = records[roulette_select(records, rng)].gene;
      auto [ca, cb] = crossover(pa, pb, config.crossover_prob, rng);
      next.push_back(mutate(std::move(ca), config.mutation_prob_per_bit, rng));
      if (next.size() < pop) next.push_back(mutate(std::move(cb), config.mutation_prob_per_bit, rng));
    }
    population = std::move(next);
  }
  if (!found) throw Error(ErrorKind::AllDiverged, "every candidate in every generation diverged");
  return result;
}

GaResult run_ga(models::Family family, const SearchData& data, const GaConfig& config) {
  auto evaluate = [&](const std::vector<Gene>& genes, int generation) {
    std::vector<FitnessRecord> records(genes.size());
    std::vector<models::TrainedModel> trained(genes.size());
    std::vector<std::exception_ptr> failures(genes.size());
    const auto n = static_cast<std::int64_t>(genes.size());
#pragma omp parallel for schedule(dynamic, 1) num_threads(kernels::thread_budget())
    for (std::int64_t i = 0; i < n; ++i) {
      const auto u = static_cast<std::size_t>(i);
      try {
        const auto stream = derive_seed(config.seed, static_cast<std::uint64_t>(generation), u);
        records[u] = train_candidate(genes[u], family, data, config, stream, &trained[u]);
      } catch (...) {
        failures[u] = std::current_exception();
      }
    }
    for (const auto& f : failures)
      if (f) std::rethrow_exception(f);
    // timing runs alone, one candidate at a time
    for (std::size_t i = 0; i < genes.size(); ++i) {
      if (records[i].diverged) continue;
      records[i].latency_ms =
          eval::measure_latency(trained[i], data.val, config.latency_repeats, config.latency_warmup).mean_latency_ms;
    }
    return records;
  };
  return run_ga(family, evaluate, config);
}

BatchEvaluator surrogate_evaluator(models::Family family, std::vector<int> target) {
  const auto width = gene_width(family);
  if (target.size() * kBitsPerParameter != width)
    throw Error(ErrorKind::WidthMismatch, "surrogate target needs one value per gene group");
  return [family, width, target](const std::vector<Gene>& genes, int) {
    std::vector<FitnessRecord> out;
    for (const auto& gene : genes) {
      FitnessRecord rec;
      rec.gene = gene;
      rec.spec = decode_gene(gene, family);
      const auto raw = raw_groups(gene);
      std::vector<int> values = raw;
      if (family != models::Family::gbdt) values = rec.spec.layer_widths;
      double distance = 0.0;
      for (std::size_t i = 0; i < values.size(); ++i) distance += std::abs(values[i] - target[i]);
      std::size_t gene_value = 0;
      for (auto b : gene.bits) gene_value = (gene_value << 1) | b;
      const auto key = static_cast<std::size_t>(distance) * (std::size_t{1} << width) + gene_value;
      rec.performance = -static_cast<double>(key);
      rec.latency_ms = static_cast<double>(key);
      rec.size_bytes = key;
      out.push_back(std::move(rec));
    }
    return out;
  };
}

std::string history_jsonl(const GaResult& result) {
  std::string out;
  for (const auto& generation : result.history) {
    for (const auto& r : generation) {
      nlohmann::ordered_json j;
      j["generation"] = r.generation;
      j["index"] = r.index;
      j["gene"] = r.gene.hex();
      j["spec"] = nlohmann::ordered_json::parse(r.spec.to_json());
      j["performance"] = r.performance;
      j["latency_ms"] = r.latency_ms;
      j["size_bytes"] = r.size_bytes;
      j["diverged"] = r.diverged;
      j["rank_avg"] = r.rank_avg;
      out += j.dump() + "\n";
    }
  }
  return out;
}

}  // namespace pulsegate::gaopt
