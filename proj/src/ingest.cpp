#include "pulsegate/ingest.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <sstream>

#include "pulsegate/error.hpp"

namespace pulsegate::ingest {
namespace {

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t bar = line.find('|', start);
    if (bar == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, bar - start));
    start = bar + 1;
  }
  return out;
}

std::optional<double> parse_number(std::string_view field) {
  double value = 0.0;
  const char* end = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(field.data(), end, value);
  if (ec != std::errc{} || ptr != end || !std::isfinite(value)) return std::nullopt;
  return value;
}

[[noreturn]] void malformed(std::size_t line_no, const std::string& why) {
  throw Error(ErrorKind::MalformedRow, "line " + std::to_string(line_no) + ": " + why);
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace

RawPatientRecord parse_psv(std::string_view text, std::string patient_id) {
  RawPatientRecord record;
  record.patient_id = std::move(patient_id);
  record.source = RecordSource::real_psv;

  std::size_t pos = 0;
  std::size_t line_no = 0;
  auto next_line = [&](std::string_view& line) {
    if (pos >= text.size()) return false;
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    line = text.substr(pos, nl - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    pos = nl + 1;
    ++line_no;
    return true;
  };

  std::string_view header;
  if (!next_line(header)) throw Error(ErrorKind::MissingColumn, "HR (empty file)");
  const auto columns = split_fields(header);
  auto column_of = [&](std::string_view name) {
    auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) throw Error(ErrorKind::MissingColumn, std::string(name));
    return static_cast<std::size_t>(it - columns.begin());
  };
  const std::size_t hr_col = column_of("HR");
  const std::size_t age_col = column_of("Age");
  const std::size_t label_col = column_of("SepsisLabel");

  std::string_view line;
  bool seen_positive = false;
  while (next_line(line)) {
    if (line.empty()) continue;
    const auto fields = split_fields(line);
    if (fields.size() != columns.size()) {
      malformed(line_no, "expected " + std::to_string(columns.size()) + " fields, got " +
                             std::to_string(fields.size()));
    }

    HourlyObservation obs;
    obs.hour_index = record.observations.size();
    if (fields[hr_col] != "NaN") {
      obs.heart_rate = parse_number(fields[hr_col]);
      if (!obs.heart_rate) malformed(line_no, "bad HR value");
    }

    const auto age = parse_number(fields[age_col]);
    if (!age) malformed(line_no, "bad Age value");
    if (record.observations.empty()) {
      record.age = *age;
    } else if (*age != record.age) {
      malformed(line_no, "Age differs from first row");
    }

    if (fields[label_col] == "0") {
      obs.sepsis_label = 0;
    } else if (fields[label_col] == "1") {
      obs.sepsis_label = 1;
    } else {
      malformed(line_no, "SepsisLabel must be 0 or 1");
    }
    if (seen_positive && obs.sepsis_label == 0) {
      throw Error(ErrorKind::NonMonotoneSepsisLabel, "label returns to 0 at line " + std::to_string(line_no));
    }
    seen_positive = seen_positive || obs.sepsis_label == 1;

    record.observations.push_back(obs);
  }
  if (record.observations.empty()) throw Error(ErrorKind::EmptyRecord, "no data rows");
  return record;
}

std::string write_psv(const RawPatientRecord& record) {
  std::string out = "HR|Age|SepsisLabel\n";
  const std::string age = format_double(record.age);
  for (const auto& obs : record.observations) {
    out += obs.heart_rate ? format_double(*obs.heart_rate) : std::string("NaN");
    out += '|';
    out += age;
    out += '|';
    out += obs.sepsis_label ? '1' : '0';
    out += '\n';
  }
  return out;
}

RawPatientRecord plausibility_filter(RawPatientRecord record) {
  for (auto& obs : record.observations) {
    if (obs.heart_rate && (*obs.heart_rate < kMinPlausibleHr || *obs.heart_rate > kMaxPlausibleHr)) {
      obs.heart_rate.reset();
    }
  }
  return record;
}

bool cohort_filter(const RawPatientRecord& record, const CohortCriteria& criteria) {
  return record.age > criteria.min_age_exclusive &&
         record.observations.size() > criteria.min_stay_hours_exclusive;
}

std::optional<std::size_t> find_sepsis_onset(const RawPatientRecord& record) {
  for (const auto& obs : record.observations) {
    if (obs.sepsis_label == 1) return obs.hour_index;
  }
  return std::nullopt;
}

RawPatientRecord read_psv_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_psv(buf.str(), path.stem().string());
}

std::vector<RawPatientRecord> read_psv_directory(const std::filesystem::path& dir) {
  std::error_code ec;
  if (!std::filesystem::is_directory(dir, ec)) throw Error(ErrorKind::IoError, "not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".psv") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  std::vector<RawPatientRecord> records(files.size());
  std::vector<std::exception_ptr> failures(files.size());
  const auto n = static_cast<std::ptrdiff_t>(files.size());
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    try {
      records[i] = read_psv_file(files[i]);
    } catch (...) {
      failures[i] = std::current_exception();
    }
  }
  for (std::size_t i = 0; i < failures.size(); ++i) {
    if (!failures[i]) continue;
    try {
      std::rethrow_exception(failures[i]);
    } catch (const Error& e) {
      throw Error(e.kind(), files[i].filename().string() + ": " + e.what());
    }
  }
  return records;
}

}  // namespace pulsegate::ingest
