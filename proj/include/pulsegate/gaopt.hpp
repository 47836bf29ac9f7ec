#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "pulsegate/models.hpp"
#include "pulsegate/random.hpp"
#include "pulsegate/windowing.hpp"

namespace pulsegate::gaopt {

inline constexpr std::size_t kBitsPerParameter = 8;

/// Bitstring, one 0/1 entry per bit, 8 bits per searched parameter read big-endian.
struct Gene {
  std::vector<std::uint8_t> bits;

  std::size_t width() const { return bits.size(); }
  /// Two hex digits per 8-bit group.
  std::string hex() const;
  static Gene from_hex(std::string_view hex);
  bool operator==(const Gene&) const = default;
};

/// mlp and gbdt: 24 bits, lstm and lstm_fcn: 32 bits.
std::size_t gene_width(models::Family family);

/// Raw 0 widths clamp to 1. gbdt: leaves 2 + raw, max_bin 8 + raw,
/// learning rate 0.005 + raw * 0.295 / 255. Throws WidthMismatch.
models::ModelSpec decode_gene(const Gene& gene, models::Family family);
/// Inverse of decode_gene on specs it can produce. Throws BadSpec.
Gene encode_gene(const models::ModelSpec& spec);

struct GaConfig {
  int population_size = 20;
  int generations = 15;
  double crossover_prob = 0.7;
  double mutation_prob_per_bit = 0.02;
  int elite_count = 1;
  int candidate_epochs = 20;
  // Candidate latency uses fewer passes than a full profile.
  int latency_repeats = 5;
  int latency_warmup = 1;
  std::uint64_t seed = 0;

  /// Throws BadSpec.
  void validate() const;
};

struct FitnessRecord {
  Gene gene;
  models::ModelSpec spec;
  double performance = 0.0;  // accuracy + specificity at sensitivity 0.85
  double latency_ms = 0.0;
  std::size_t size_bytes = 0;
  bool diverged = false;
  double rank_avg = 0.0;  // lower is better
  int generation = 0;
  int index = 0;
};

std::vector<Gene> init_population(const GaConfig& config, models::Family family);

/// True when the mean of the first two losses is below the mean of the last two.
bool diverged(std::span<const double> losses);

struct SearchData {
  const windowing::LabeledDataset& train;
  const windowing::LabeledDataset& val;
};

/// Training and scoring only; latency_ms is left at zero. Safe to call
/// concurrently on distinct genes. `trained` receives the model when it did not diverge.
FitnessRecord train_candidate(const Gene& gene, models::Family family, const SearchData& data, const GaConfig& config,
                              std::uint64_t stream_seed, models::TrainedModel* trained = nullptr);
/// train_candidate followed by the latency measurement.
FitnessRecord evaluate_candidate(const Gene& gene, models::Family family, const SearchData& data,
                                 const GaConfig& config, std::uint64_t stream_seed);

/// Ranks performance (descending), latency and size (ascending) with tied
/// ranks averaged; records sharing a gene are ranked once. Diverged records
/// get records.size() + 1. Throws AllDiverged.
void rank_average_fitness(std::vector<FitnessRecord>& records);

/// (max rank_avg - rank_avg) + 1 per record.
std::vector<double> roulette_weights(std::span<const FitnessRecord> records);
std::size_t roulette_select(std::span<const FitnessRecord> records, Rng& rng);

/// Single cut point uniform in [1, width - 1] with probability `prob`.
/// Throws WidthMismatch.
std::pair<Gene, Gene> crossover(const Gene& a, const Gene& b, double prob, Rng& rng);
/// Crossover at a fixed cut.
std::pair<Gene, Gene> crossover_at(const Gene& a, const Gene& b, std::size_t cut);
Gene mutate(Gene gene, double prob_per_bit, Rng& rng);

/// Scores one generation; must fill every field except rank_avg.
using BatchEvaluator = std::function<std::vector<FitnessRecord>(const std::vector<Gene>& genes, int generation)>;

struct GaResult {
  FitnessRecord best;
  std::vector<std::vector<FitnessRecord>> history;  // one entry per generation
};

/// Throws AllDiverged when no generation produced a usable candidate.
GaResult run_ga(models::Family family, const BatchEvaluator& evaluate, const GaConfig& config);
/// Trains candidates in parallel (PULSEGATE_THREADS), then times them serially.
GaResult run_ga(models::Family family, const SearchData& data, const GaConfig& config);

/// Deterministic stand-in fitness: distance = sum |w - target| over the
/// decoded widths (raw bytes for gbdt). key = distance * 2^width + gene
/// value breaks ties; performance = -key, latency = size = key.
BatchEvaluator surrogate_evaluator(models::Family family, std::vector<int> target);

/// One JSON object per candidate.
std::string history_jsonl(const GaResult& result);

}  // namespace pulsegate::gaopt
