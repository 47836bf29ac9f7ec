#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace pulsegate::ingest {

struct HourlyObservation {
  std::size_t hour_index = 0;
  std::optional<double> heart_rate;  // beats per minute; nullopt = missing
  int sepsis_label = 0;
};

enum class RecordSource { real_psv, synthetic };

struct RawPatientRecord {
  std::string patient_id;
  double age = 0.0;
  std::vector<HourlyObservation> observations;
  RecordSource source = RecordSource::real_psv;
};

struct CohortCriteria {
  double min_age_exclusive = 14.0;
  std::size_t min_stay_hours_exclusive = 12;
};

/// Physiological bounds of the plausibility filter (inclusive: 15 and 300 survive).
inline constexpr double kMinPlausibleHr = 15.0;
inline constexpr double kMaxPlausibleHr = 300.0;

/// Parses one pipe-separated PhysioNet-2019 style patient file. Only the HR,
/// Age and SepsisLabel columns are read; other columns are skipped by name.
/// Throws Error{MissingColumn, MalformedRow, NonMonotoneSepsisLabel, EmptyRecord}.
RawPatientRecord parse_psv(std::string_view text, std::string patient_id = {});

/// Writes the retained columns back as `HR|Age|SepsisLabel` with round-trip
/// precision; parse_psv(write_psv(r)) reproduces r's values exactly.
std::string write_psv(const RawPatientRecord& record);

/// Readings outside [15, 300] bpm become missing; the row count is unchanged.
RawPatientRecord plausibility_filter(RawPatientRecord record);

bool cohort_filter(const RawPatientRecord& record, const CohortCriteria& criteria = {});

std::optional<std::size_t> find_sepsis_onset(const RawPatientRecord& record);

RawPatientRecord read_psv_file(const std::filesystem::path& path);

/// Reads every `*.psv` file of a directory in filename order. Files are parsed
/// in parallel; the result order does not depend on scheduling.
std::vector<RawPatientRecord> read_psv_directory(const std::filesystem::path& dir);

}  // namespace pulsegate::ingest
