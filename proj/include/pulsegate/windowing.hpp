#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pulsegate/ingest.hpp"
#include "pulsegate/random.hpp"

namespace pulsegate::windowing {

inline constexpr std::size_t kWindowHours = 12;
inline constexpr std::size_t kMaxMissingHours = 4;
inline constexpr std::size_t kMaxAugmentedPositions = 8;
inline constexpr double kNoiseSigma = 2.0;
inline constexpr double kNoiseBound = 4.0;

enum class Label : std::uint8_t { non_sepsis = 0, sepsis = 1 };

using WindowValues = std::array<double, kWindowHours>;
using RawSlice = std::array<std::optional<double>, kWindowHours>;

/// Twelve imputed hourly heart rates plus their label; the model input.
struct HeartRateWindow {
  WindowValues values{};
  Label label = Label::non_sepsis;
  int horizon_hours = 1;
  std::string patient_id;
  bool augmented = false;

  bool operator==(const HeartRateWindow&) const = default;
};

struct LabeledDataset {
  std::vector<HeartRateWindow> windows;
  int horizon_hours = 1;

  std::size_t count(Label label) const;
  double prevalence() const;
  bool operator==(const LabeledDataset&) const = default;
};

/// An extracted but not yet imputed 12-hour slice.
struct ExtractedSlice {
  RawSlice values{};
  Label label = Label::non_sepsis;
  int horizon_hours = 1;
  std::string patient_id;
};

struct SplitSpec {
  double train_fraction = 0.7;
  double val_fraction = 0.15;
  double test_fraction = 0.15;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SplitResult {
  LabeledDataset train, val, test;
  std::vector<std::string> train_patients, val_patients, test_patients;
};

struct SyntheticCohortParams {
  std::size_t n_patients = 1000;
  double sepsis_fraction = 0.15;
  double baseline_hr_mean = 75.0;
  double baseline_hr_sd = 10.0;
  double drift_per_hour = 2.0;
  double missing_rate = 0.1;
  std::uint64_t seed = 0;
  // Stay length and age ranges (uniform draws).
  std::size_t stay_hours_min = 8;
  std::size_t stay_hours_max = 72;
  double age_min = 10.0;
  double age_max = 90.0;

  void validate() const;
};

/// non-sepsis: the final 12 hours. sepsis: hours [onset-h-11, onset-h].
/// nullopt when the sepsis case has no room for that span.
std::optional<ExtractedSlice> extract_window(const ingest::RawPatientRecord& record, int horizon_hours);

/// Keep iff at most four of the twelve hours are missing.
bool missingness_gate(const RawSlice& slice);

/// Forward fill with a backward fill of any missing prefix.
/// Throws Error{AllMissing}.
HeartRateWindow impute_forward_fill(const ExtractedSlice& slice);

/// Perturbs 1..8 distinct positions by N(0, 2) noise truncated to [-4, 4].
HeartRateWindow augment_noise(const HeartRateWindow& window, Rng& rng);

/// Appends noise-augmented copies of original sepsis windows (sampled
/// uniformly with replacement) until the sepsis fraction reaches the target.
/// Throws Error{NoMinorityClass}.
LabeledDataset balance_dataset(LabeledDataset ds, Rng& rng, double target_prevalence = 0.30);

/// Patient-level, label-stratified, seeded split. Throws Error{EmptyPartition}.
SplitResult split(const LabeledDataset& ds, const SplitSpec& spec);

/// Reuses the patient assignment of an earlier split (e.g. the 1-hour split
/// applied to the 4-hour windows of the same cohort). Patients the reference
/// never saw go to the training partition.
SplitResult apply_partition(const LabeledDataset& ds, const SplitResult& reference);

std::vector<ingest::RawPatientRecord> synthesize_cohort(const SyntheticCohortParams& params);

/// Per-stage counts of the preprocessing flow.
struct StageCounts {
  std::size_t patients_parsed = 0;
  std::size_t cohort_kept = 0;
  std::size_t windows_extracted = 0;
  std::size_t windows_gated = 0;
  std::size_t windows_imputed = 0;
  std::size_t windows_balanced = 0;
};

/// plausibility filter -> cohort filter -> extraction -> gate -> imputation.
LabeledDataset build_dataset(const std::vector<ingest::RawPatientRecord>& records, int horizon_hours,
                             StageCounts* counts = nullptr, const ingest::CohortCriteria& criteria = {});

struct PreprocessResult {
  SplitResult split;
  StageCounts counts;
};

/// Full flow: build_dataset, split, then balance the training partition only.
PreprocessResult preprocess(const std::vector<ingest::RawPatientRecord>& records, int horizon_hours,
                            const SplitSpec& split_spec, std::uint64_t seed, double target_prevalence = 0.30,
                            const ingest::CohortCriteria& criteria = {});

/// CSV with columns patient_id,horizon_hours,label,augmented,hr_00..hr_11.
std::string write_dataset_csv(const LabeledDataset& ds);
LabeledDataset read_dataset_csv(std::string_view text);

}  // namespace pulsegate::windowing
