#include "pulsegate/windowing.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <set>
#include <unordered_map>

#include "pulsegate/error.hpp"

namespace pulsegate::windowing {

std::size_t LabeledDataset::count(Label label) const {
  return static_cast<std::size_t>(
      std::count_if(windows.begin(), windows.end(), [&](const auto& w) { return w.label == label; }));
}

double LabeledDataset::prevalence() const {
  if (windows.empty()) return 0.0;
  return static_cast<double>(count(Label::sepsis)) / static_cast<double>(windows.size());
}

void SplitSpec::validate() const {
  for (double f : {train_fraction, val_fraction, test_fraction}) {
    if (!(f > 0.0 && f < 1.0)) throw Error(ErrorKind::ConfigError, "split fractions must lie in (0,1)");
  }
  if (std::abs(train_fraction + val_fraction + test_fraction - 1.0) > 1e-9) {
    throw Error(ErrorKind::ConfigError, "split fractions must sum to 1");
  }
}

void SyntheticCohortParams::validate() const {
  if (n_patients < 1) throw Error(ErrorKind::ConfigError, "n_patients must be >= 1");
  if (!(baseline_hr_sd > 0.0)) throw Error(ErrorKind::ConfigError, "baseline_hr_sd must be > 0");
  if (!(sepsis_fraction >= 0.0 && sepsis_fraction < 1.0)) throw Error(ErrorKind::ConfigError, "sepsis_fraction must lie in [0,1)");
  if (!(missing_rate >= 0.0 && missing_rate < 1.0)) throw Error(ErrorKind::ConfigError, "missing_rate must lie in [0,1)");
  if (stay_hours_min < 1 || stay_hours_max < stay_hours_min) throw Error(ErrorKind::ConfigError, "bad stay range");
  if (age_max < age_min) throw Error(ErrorKind::ConfigError, "bad age range");
}

std::optional<ExtractedSlice> extract_window(const ingest::RawPatientRecord& record, int horizon_hours) {
  const auto& obs = record.observations;
  const auto onset = ingest::find_sepsis_onset(record);
  std::size_t first = 0;
  if (!onset) {
    if (obs.size() < kWindowHours) return std::nullopt;
    first = obs.size() - kWindowHours;
  } else {
    const auto h = static_cast<std::size_t>(horizon_hours);
    // Last hour in the window is onset - h, so the first is onset - h - 11.
    if (*onset < h + kWindowHours - 1) return std::nullopt;
    first = *onset - h - (kWindowHours - 1);
  }

  ExtractedSlice slice;
  slice.label = onset ? Label::sepsis : Label::non_sepsis;
  slice.horizon_hours = horizon_hours;
  slice.patient_id = record.patient_id;
  for (std::size_t i = 0; i < kWindowHours; ++i) slice.values[i] = obs[first + i].heart_rate;
  return slice;
}

bool missingness_gate(const RawSlice& slice) {
  const auto missing = std::count_if(slice.begin(), slice.end(), [](const auto& v) { return !v.has_value(); });
  return static_cast<std::size_t>(missing) <= kMaxMissingHours;
}

HeartRateWindow impute_forward_fill(const ExtractedSlice& slice) {
  const auto first_present =
      std::find_if(slice.values.begin(), slice.values.end(), [](const auto& v) { return v.has_value(); });
  if (first_present == slice.values.end()) throw Error(ErrorKind::AllMissing, "slice of " + slice.patient_id);

  HeartRateWindow window;
  window.label = slice.label;
  window.horizon_hours = slice.horizon_hours;
  window.patient_id = slice.patient_id;
  double carry = **first_present;
  for (std::size_t i = 0; i < kWindowHours; ++i) {
    if (slice.values[i]) carry = *slice.values[i];
    window.values[i] = carry;
  }
  return window;
}

HeartRateWindow augment_noise(const HeartRateWindow& window, Rng& rng) {
  HeartRateWindow out = window;
  std::uniform_int_distribution<std::size_t> count_dist(1, kMaxAugmentedPositions);
  const std::size_t k = count_dist(rng);

  std::array<std::size_t, kWindowHours> positions{};
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  // Partial Fisher-Yates: the first k entries are a uniform k-subset.
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, kWindowHours - 1);
    std::swap(positions[i], positions[pick(rng)]);
  }

  std::normal_distribution<double> noise(0.0, kNoiseSigma);
  for (std::size_t i = 0; i < k; ++i) {
    double delta = noise(rng);
    while (std::abs(delta) > kNoiseBound) delta = noise(rng);
    out.values[positions[i]] += delta;
  }
  out.augmented = true;
  return out;
}

LabeledDataset balance_dataset(LabeledDataset ds, Rng& rng, double target_prevalence) {
  std::vector<std::size_t> originals;
  std::size_t sepsis = 0;
  for (std::size_t i = 0; i < ds.windows.size(); ++i) {
    if (ds.windows[i].label != Label::sepsis) continue;
    ++sepsis;
    if (!ds.windows[i].augmented) originals.push_back(i);
  }
  const std::size_t non_sepsis = ds.windows.size() - sepsis;
  if (originals.empty() || non_sepsis == 0) {
    throw Error(ErrorKind::NoMinorityClass, "balancing needs original windows of both classes");
  }

  auto reached = [&] {
    return static_cast<double>(sepsis) / static_cast<double>(sepsis + non_sepsis) >= target_prevalence;
  };
  std::uniform_int_distribution<std::size_t> pick(0, originals.size() - 1);
  while (!reached()) {
    const HeartRateWindow source = ds.windows[originals[pick(rng)]];
    ds.windows.push_back(augment_noise(source, rng));
    ++sepsis;
  }
  return ds;
}

namespace {

SplitResult assemble(const LabeledDataset& ds, const std::unordered_map<std::string, int>& partition_of,
                     std::vector<std::string> train_ids, std::vector<std::string> val_ids,
                     std::vector<std::string> test_ids) {
  SplitResult out;
  for (auto* part : {&out.train, &out.val, &out.test}) part->horizon_hours = ds.horizon_hours;
  for (const auto& w : ds.windows) {
    const auto it = partition_of.find(w.patient_id);
    const int p = it == partition_of.end() ? 0 : it->second;
    (p == 0 ? out.train : p == 1 ? out.val : out.test).windows.push_back(w);
  }
  out.train_patients = std::move(train_ids);
  out.val_patients = std::move(val_ids);
  out.test_patients = std::move(test_ids);
  return out;
}

}  // namespace

SplitResult split(const LabeledDataset& ds, const SplitSpec& spec) {
  spec.validate();
  if (ds.windows.empty()) throw Error(ErrorKind::EmptyPartition, "empty dataset");

  // Patient stratum: 1 if any of the patient's windows is septic. Patients are
  // listed in first-appearance order so the result only depends on the seed.
  std::vector<std::string> patients;
  std::unordered_map<std::string, int> stratum;
  for (const auto& w : ds.windows) {
    auto [it, inserted] = stratum.emplace(w.patient_id, 0);
    if (inserted) patients.push_back(w.patient_id);
    if (w.label == Label::sepsis) it->second = 1;
  }

  std::array<std::vector<std::string>, 2> strata;
  for (const auto& p : patients) strata[stratum[p]].push_back(p);
  Rng rng(derive_seed(spec.seed, "split"));
  for (auto& s : strata) std::shuffle(s.begin(), s.end(), rng);

  // Interleave strata by relative position so every prefix is stratified.
  struct Keyed {
    double key;
    int stratum;
    std::size_t index;
  };
  std::vector<Keyed> order;
  for (int s = 0; s < 2; ++s) {
    const double m = static_cast<double>(strata[s].size());
    for (std::size_t i = 0; i < strata[s].size(); ++i) order.push_back({(static_cast<double>(i) + 0.5) / m, s, i});
  }
  std::sort(order.begin(), order.end(), [](const Keyed& a, const Keyed& b) {
    if (a.key != b.key) return a.key < b.key;
    return a.stratum < b.stratum;
  });

  const auto n = static_cast<long long>(patients.size());
  const long long n_train = std::llround(spec.train_fraction * static_cast<double>(n));
  const long long n_val = std::llround(spec.val_fraction * static_cast<double>(n));
  const long long n_test = n - n_train - n_val;
  if (n_train <= 0 || n_val <= 0 || n_test <= 0) {
    throw Error(ErrorKind::EmptyPartition, "a partition of " + std::to_string(n) + " patients rounds to zero");
  }

  std::unordered_map<std::string, int> partition_of;
  std::vector<std::string> ids[3];
  for (long long i = 0; i < n; ++i) {
    const auto& id = strata[order[i].stratum][order[i].index];
    const int p = i < n_train ? 0 : i < n_train + n_val ? 1 : 2;
    partition_of[id] = p;
    ids[p].push_back(id);
  }
  return assemble(ds, partition_of, std::move(ids[0]), std::move(ids[1]), std::move(ids[2]));
}

SplitResult apply_partition(const LabeledDataset& ds, const SplitResult& reference) {
  std::unordered_map<std::string, int> partition_of;
  for (const auto& id : reference.train_patients) partition_of[id] = 0;
  for (const auto& id : reference.val_patients) partition_of[id] = 1;
  for (const auto& id : reference.test_patients) partition_of[id] = 2;
  return assemble(ds, partition_of, reference.train_patients, reference.val_patients, reference.test_patients);
}

std::vector<ingest::RawPatientRecord> synthesize_cohort(const SyntheticCohortParams& params) {
  params.validate();
  std::vector<ingest::RawPatientRecord> cohort(params.n_patients);
  const auto n = static_cast<std::ptrdiff_t>(params.n_patients);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t p = 0; p < n; ++p) {
    // One stream per patient so the cohort does not depend on thread count.
    Rng rng(derive_seed(params.seed, static_cast<std::uint64_t>(p), 0x5e9515ULL));
    std::bernoulli_distribution is_septic(params.sepsis_fraction);
    std::uniform_int_distribution<std::size_t> stay_dist(params.stay_hours_min, params.stay_hours_max);
    std::uniform_real_distribution<double> age_dist(params.age_min, params.age_max);
    std::normal_distribution<double> hr_dist(params.baseline_hr_mean, params.baseline_hr_sd);
    std::bernoulli_distribution is_missing(params.missing_rate);

    auto& record = cohort[p];
    char id[32];
    std::snprintf(id, sizeof(id), "synth_%06td", p);
    record.patient_id = id;
    record.source = ingest::RecordSource::synthetic;

    const bool septic = is_septic(rng);
    const std::size_t stay = stay_dist(rng);
    record.age = age_dist(rng);

    std::optional<std::size_t> onset;
    if (septic && stay >= 2) {
      // Onset lands in the last day of the stay, never at hour 0.
      const std::size_t lo = stay > 25 ? stay - 24 : 1;
      onset = std::uniform_int_distribution<std::size_t>(lo, stay - 1)(rng);
    }

    record.observations.resize(stay);
    for (std::size_t t = 0; t < stay; ++t) {
      double hr = hr_dist(rng);
      int label = 0;
      if (onset) {
        // Ramp over the 12 pre-onset hours: +0 at onset-12 up to +11*drift at
        // onset-1, then a plateau.
        const auto rel = static_cast<long long>(t) - static_cast<long long>(*onset) + 12;
        const auto steps = std::clamp<long long>(rel, 0, 11);
        hr += params.drift_per_hour * static_cast<double>(steps);
        label = t >= *onset ? 1 : 0;
      }
      hr = std::clamp(hr, ingest::kMinPlausibleHr, ingest::kMaxPlausibleHr);
      const bool missing = is_missing(rng);
      record.observations[t] = {t, missing ? std::nullopt : std::optional<double>(hr), label};
    }
  }
  return cohort;
}

LabeledDataset build_dataset(const std::vector<ingest::RawPatientRecord>& records, int horizon_hours,
                             StageCounts* counts, const ingest::CohortCriteria& criteria) {
  if (horizon_hours < 1) throw Error(ErrorKind::ConfigError, "horizon must be >= 1");
  LabeledDataset ds;
  ds.horizon_hours = horizon_hours;
  StageCounts local;
  local.patients_parsed = records.size();
  for (const auto& raw : records) {
    auto record = ingest::plausibility_filter(raw);
    if (!ingest::cohort_filter(record, criteria)) continue;
    ++local.cohort_kept;
    auto slice = extract_window(record, horizon_hours);
    if (!slice) continue;
    ++local.windows_extracted;
    if (!missingness_gate(slice->values)) continue;
    ++local.windows_gated;
    ds.windows.push_back(impute_forward_fill(*slice));
    ++local.windows_imputed;
  }
  local.windows_balanced = ds.windows.size();
  if (counts) *counts = local;
  return ds;
}

PreprocessResult preprocess(const std::vector<ingest::RawPatientRecord>& records, int horizon_hours,
                            const SplitSpec& split_spec, std::uint64_t seed, double target_prevalence,
                            const ingest::CohortCriteria& criteria) {
  PreprocessResult out;
  const LabeledDataset ds = build_dataset(records, horizon_hours, &out.counts, criteria);
  out.split = split(ds, split_spec);
  Rng rng(derive_seed(seed, "balance"));
  out.split.train = balance_dataset(std::move(out.split.train), rng, target_prevalence);
  out.counts.windows_balanced =
      out.split.train.windows.size() + out.split.val.windows.size() + out.split.test.windows.size();
  return out;
}

namespace {

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

[[noreturn]] void bad_csv(std::size_t line_no, const std::string& why) {
  throw Error(ErrorKind::MalformedRow, "dataset csv line " + std::to_string(line_no) + ": " + why);
}

}  // namespace

std::string write_dataset_csv(const LabeledDataset& ds) {
  std::string out = "patient_id,horizon_hours,label,augmented";
  for (std::size_t i = 0; i < kWindowHours; ++i) {
    char col[8];
    std::snprintf(col, sizeof(col), ",hr_%02zu", i);
    out += col;
  }
  out += '\n';
  for (const auto& w : ds.windows) {
    if (w.patient_id.find_first_of(",\"\r\n") != std::string::npos) {
      throw Error(ErrorKind::IoError, "patient id not representable in csv: " + w.patient_id);
    }
    out += w.patient_id;
    out += ',' + std::to_string(w.horizon_hours);
    out += w.label == Label::sepsis ? ",1" : ",0";
    out += w.augmented ? ",1" : ",0";
    for (double v : w.values) out += ',' + format_double(v);
    out += '\n';
  }
  return out;
}

LabeledDataset read_dataset_csv(std::string_view text) {
  LabeledDataset ds;
  ds.horizon_hours = 0;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  bool header = true;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (header) {
      if (!line.starts_with("patient_id,horizon_hours,label,augmented")) bad_csv(line_no, "unexpected header");
      header = false;
      continue;
    }
    if (line.empty()) continue;

    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      fields.push_back(line.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
      if (comma == std::string_view::npos) break;
      start = comma + 1;
    }
    if (fields.size() != 4 + kWindowHours) bad_csv(line_no, "expected 16 fields");

    HeartRateWindow w;
    w.patient_id = std::string(fields[0]);
    auto parse_int = [&](std::string_view f) {
      int v = 0;
      auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
      if (ec != std::errc{} || ptr != f.data() + f.size()) bad_csv(line_no, "bad integer");
      return v;
    };
    w.horizon_hours = parse_int(fields[1]);
    const int label = parse_int(fields[2]);
    const int augmented = parse_int(fields[3]);
    if ((label != 0 && label != 1) || (augmented != 0 && augmented != 1)) bad_csv(line_no, "flag out of range");
    w.label = label ? Label::sepsis : Label::non_sepsis;
    w.augmented = augmented != 0;
    for (std::size_t i = 0; i < kWindowHours; ++i) {
      const auto f = fields[4 + i];
      auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), w.values[i]);
      if (ec != std::errc{} || ptr != f.data() + f.size() || !std::isfinite(w.values[i])) {
        bad_csv(line_no, "bad heart rate");
      }
    }
    if (ds.windows.empty()) {
      ds.horizon_hours = w.horizon_hours;
    } else if (w.horizon_hours != ds.horizon_hours) {
      throw Error(ErrorKind::HorizonMismatch, "mixed horizons in dataset csv");
    }
    ds.windows.push_back(std::move(w));
  }
  if (header) bad_csv(1, "missing header");
  return ds;
}

}  // namespace pulsegate::windowing
