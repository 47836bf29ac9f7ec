#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pulsegate/kernels.hpp"
#include "pulsegate/models.hpp"
#include "pulsegate/windowing.hpp"

namespace pulsegate::eval {

struct ScoredSet {
  std::vector<double> scores;
  std::vector<int> labels;  // 0 or 1

  /// Throws ShapeMismatch on unequal or empty lists, BadSpec on labels outside {0,1}.
  void validate() const;
  std::size_t positives() const;
};

ScoredSet score(const models::TrainedModel& model, const windowing::LabeledDataset& ds,
                kernels::Backend backend = kernels::Backend::automatic);

/// (threshold, x, y): ROC uses (fpr, tpr), PR uses (recall, precision).
struct CurvePoint {
  double threshold = 0.0;
  double x = 0.0;
  double y = 0.0;
};

struct RocResult {
  std::vector<CurvePoint> points;  // starts at (+inf, 0, 0)
  double auc = 0.0;
};

struct PrResult {
  std::vector<CurvePoint> points;
  double average_precision = 0.0;
};

/// Score >= threshold is classified positive.
struct OperatingPoint {
  double threshold = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  double accuracy = 0.0;
};

struct CalibrationBin {
  double lower = 0.0;
  double upper = 0.0;
  std::optional<double> mean_predicted;  // empty bins carry no means
  std::optional<double> observed_frequency;
  std::size_t count = 0;
};

struct ResourceProfile {
  std::size_t size_bytes = 0;
  double mean_latency_ms = 0.0;  // per prediction, median over timed passes
  int latency_samples = 0;
  int warmup_discarded = 0;
};

/// Trapezoid area over tie blocks, computed in integers. Throws SingleClass.
RocResult roc_auc(const ScoredSet& s);
/// Step-wise AP over descending tie blocks. Throws NoPositives.
PrResult pr_ap(const ScoredSet& s);
/// Largest threshold whose sensitivity reaches the target. Throws SingleClass.
OperatingPoint threshold_at_sensitivity(const ScoredSet& s, double target = 0.85);
OperatingPoint operating_point(const ScoredSet& s, double threshold);
/// Equal-width bins on [0, 1], the last one closed on the right.
std::vector<CalibrationBin> calibration_table(const ScoredSet& s, int bins = 10);

/// Times `repeats` passes of single-window predictions after `warmup`
/// discarded passes. Must not run concurrently with other timed work.
ResourceProfile measure_latency(const models::TrainedModel& model, std::span<const windowing::WindowValues> windows,
                                int repeats = 30, int warmup = 5);
ResourceProfile measure_latency(const models::TrainedModel& model, const windowing::LabeledDataset& ds,
                                int repeats = 30, int warmup = 5);
std::size_t measure_size(std::span<const std::byte> model_file);

struct MetricsBundle {
  std::string model_name;
  std::string family;
  int horizon_hours = 1;
  std::size_t windows = 0;
  double prevalence = 0.0;
  double auroc = 0.0;
  double aupr = 0.0;
  OperatingPoint operating;
  RocResult roc;
  PrResult pr;
  std::vector<CalibrationBin> calibration;
  ResourceProfile resources;
};

struct EvaluateOptions {
  double target_sensitivity = 0.85;
  int latency_repeats = 30;
  int latency_warmup = 5;
  bool measure_latency = true;
};

MetricsBundle evaluate(const models::TrainedModel& model, const windowing::LabeledDataset& ds,
                       std::size_t size_bytes, const EvaluateOptions& options = {});

/// metrics.json with stable key order.
std::string metrics_json(const MetricsBundle& bundle);
std::string curve_csv(const std::vector<CurvePoint>& points);
std::string calibration_csv(const std::vector<CalibrationBin>& bins);
std::string curves_svg(const MetricsBundle& bundle);

/// Writes metrics.json, roc.csv, pr.csv, calibration.csv and curves.svg.
/// Throws IoError.
void emit_report(const MetricsBundle& bundle, const std::string& out_dir);

/// Shortest round-trip decimal form; "inf"/"nan" for non-finite values.
std::string format_number(double v);

}  // namespace pulsegate::eval
