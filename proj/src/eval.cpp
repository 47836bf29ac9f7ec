#include "pulsegate/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include "pulsegate/error.hpp"

namespace pulsegate::eval {

namespace {

/// Descending-score tie blocks with per-block positive/negative counts.
struct Block {
  double score;
  std::int64_t pos = 0;
  std::int64_t neg = 0;
};

std::vector<Block> tie_blocks(const ScoredSet& s) {
  std::vector<std::size_t> order(s.scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s.scores[a] > s.scores[b]; });
  std::vector<Block> blocks;
  for (auto i : order) {
    if (blocks.empty() || blocks.back().score != s.scores[i]) blocks.push_back({s.scores[i]});
    (s.labels[i] ? blocks.back().pos : blocks.back().neg) += 1;
  }
  return blocks;
}

void require_both_classes(const ScoredSet& s) {
  s.validate();
  const auto p = s.positives();
  if (p == 0 || p == s.labels.size()) throw Error(ErrorKind::SingleClass, "metric needs both classes");
}

}  // namespace

void ScoredSet::validate() const {
  if (scores.empty() || scores.size() != labels.size())
    throw Error(ErrorKind::ShapeMismatch, "scores and labels must be equal-length and non-empty");
  for (int y : labels)
    if (y != 0 && y != 1) throw Error(ErrorKind::BadSpec, "labels must be 0 or 1");
  for (double v : scores)
    if (std::isnan(v)) throw Error(ErrorKind::BadSpec, "scores must not be NaN");
}

std::size_t ScoredSet::positives() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
}

ScoredSet score(const models::TrainedModel& model, const windowing::LabeledDataset& ds, kernels::Backend backend) {
  ScoredSet s;
  s.scores = models::predict_batch(model, ds, backend);
  for (const auto& w : ds.windows) s.labels.push_back(w.label == windowing::Label::sepsis ? 1 : 0);
  return s;
}

RocResult roc_auc(const ScoredSet& s) {
  require_both_classes(s);
  const auto blocks = tie_blocks(s);
  const auto P = static_cast<std::int64_t>(s.positives());
  const auto N = static_cast<std::int64_t>(s.labels.size()) - P;

  RocResult out;
  out.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  // twice the trapezoid area in count units: each block adds neg * (2 * tp_before + pos)
  std::int64_t twice_area = 0, tp = 0, fp = 0;
  for (const auto& b : blocks) {
    twice_area += b.neg * (2 * tp + b.pos);
    tp += b.pos;
    fp += b.neg;
    out.points.push_back({b.score, static_cast<double>(fp) / static_cast<double>(N),
                          static_cast<double>(tp) / static_cast<double>(P)});
  }
  out.auc = static_cast<double>(twice_area) / (2.0 * static_cast<double>(P) * static_cast<double>(N));
  return out;
}

PrResult pr_ap(const ScoredSet& s) {
  s.validate();
  const auto P = static_cast<std::int64_t>(s.positives());
  if (P == 0) throw Error(ErrorKind::NoPositives, "average precision needs a positive");
  PrResult out;
  std::int64_t tp = 0, seen = 0;
  double ap = 0.0, prev_recall = 0.0;
  for (const auto& b : tie_blocks(s)) {
    tp += b.pos;
    seen += b.pos + b.neg;
    const double recall = static_cast<double>(tp) / static_cast<double>(P);
    const double precision = static_cast<double>(tp) / static_cast<double>(seen);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    out.points.push_back({b.score, recall, precision});
  }
  out.average_precision = ap;
  return out;
}

OperatingPoint operating_point(const ScoredSet& s, double threshold) {
  s.validate();
  std::size_t tp = 0, tn = 0, p = 0, n = 0;
  for (std::size_t i = 0; i < s.scores.size(); ++i) {
    const bool predicted = s.scores[i] >= threshold;
    if (s.labels[i]) {
      ++p;
      tp += predicted;
    } else {
      ++n;
      tn += !predicted;
    }
  }
  OperatingPoint op;
  op.threshold = threshold;
  op.sensitivity = p ? static_cast<double>(tp) / static_cast<double>(p) : 0.0;
  op.specificity = n ? static_cast<double>(tn) / static_cast<double>(n) : 0.0;
  op.accuracy = static_cast<double>(tp + tn) / static_cast<double>(s.scores.size());
  return op;
}

OperatingPoint threshold_at_sensitivity(const ScoredSet& s, double target) {
  require_both_classes(s);
  if (!(target >= 0.0 && target <= 1.0)) throw Error(ErrorKind::BadSpec, "target sensitivity must lie in [0, 1]");
  const auto P = static_cast<double>(s.positives());
  std::int64_t tp = 0;
  for (const auto& b : tie_blocks(s)) {
    tp += b.pos;
    if (static_cast<double>(tp) / P >= target) return operating_point(s, b.score);
  }
  return operating_point(s, *std::min_element(s.scores.begin(), s.scores.end()));
}

std::vector<CalibrationBin> calibration_table(const ScoredSet& s, int bins) {
  s.validate();
  if (bins < 1) throw Error(ErrorKind::BadSpec, "calibration needs at least one bin");
  const auto nb = static_cast<std::size_t>(bins);
  std::vector<CalibrationBin> out(nb);
  std::vector<double> sum_pred(nb, 0.0), sum_obs(nb, 0.0);
  std::vector<double> lo(nb, 1.0), hi(nb, 0.0);
  for (std::size_t b = 0; b < nb; ++b) {
    out[b].lower = static_cast<double>(b) / static_cast<double>(bins);
    out[b].upper = static_cast<double>(b + 1) / static_cast<double>(bins);
  }
  for (std::size_t i = 0; i < s.scores.size(); ++i) {
    const double v = std::clamp(s.scores[i], 0.0, 1.0);
    auto b = std::min(static_cast<std::size_t>(v * static_cast<double>(bins)), nb - 1);
    // v * bins can round across a bound; settle on the bin whose stored bounds hold v
    while (b > 0 && v < out[b].lower) --b;
    while (b + 1 < nb && v >= out[b].upper) ++b;
    out[b].count += 1;
    sum_pred[b] += v;
    sum_obs[b] += s.labels[i];
    lo[b] = std::min(lo[b], v);
    hi[b] = std::max(hi[b], v);
  }
  for (std::size_t b = 0; b < nb; ++b) {
    if (out[b].count == 0) continue;
    const auto c = static_cast<double>(out[b].count);
    // the rounded quotient can land an ulp outside [min, max] of the bin
    out[b].mean_predicted = std::clamp(sum_pred[b] / c, lo[b], hi[b]);
    out[b].observed_frequency = sum_obs[b] / c;
  }
  return out;
}

ResourceProfile measure_latency(const models::TrainedModel& model, std::span<const windowing::WindowValues> windows,
                                int repeats, int warmup) {
  if (windows.empty()) throw Error(ErrorKind::ShapeMismatch, "latency needs at least one window");
  if (repeats < 1 || warmup < 0) throw Error(ErrorKind::BadSpec, "latency needs repeats >= 1 and warmup >= 0");
  using clock = std::chrono::steady_clock;
  volatile double sink = 0.0;
  auto pass = [&] {
    double acc = 0.0;
    for (const auto& w : windows) acc += models::predict(model, w);
    sink = sink + acc;
  };
  for (int i = 0; i < warmup; ++i) pass();
  std::vector<double> per_prediction_ms;
  per_prediction_ms.reserve(static_cast<std::size_t>(repeats));
  for (int i = 0; i < repeats; ++i) {
    const auto start = clock::now();
    pass();
    const std::chrono::duration<double, std::milli> elapsed = clock::now() - start;
    per_prediction_ms.push_back(elapsed.count() / static_cast<double>(windows.size()));
  }
  std::sort(per_prediction_ms.begin(), per_prediction_ms.end());
  const std::size_t m = per_prediction_ms.size();
  ResourceProfile profile;
  profile.mean_latency_ms = m % 2 ? per_prediction_ms[m / 2] : (per_prediction_ms[m / 2 - 1] + per_prediction_ms[m / 2]) / 2;
  profile.latency_samples = repeats;
  profile.warmup_discarded = warmup;
  return profile;
}

ResourceProfile measure_latency(const models::TrainedModel& model, const windowing::LabeledDataset& ds, int repeats,
                                int warmup) {
  std::vector<windowing::WindowValues> windows;
  windows.reserve(ds.windows.size());
  for (const auto& w : ds.windows) windows.push_back(w.values);
  return measure_latency(model, windows, repeats, warmup);
}

std::size_t measure_size(std::span<const std::byte> model_file) { return model_file.size(); }

MetricsBundle evaluate(const models::TrainedModel& model, const windowing::LabeledDataset& ds, std::size_t size_bytes,
                       const EvaluateOptions& options) {
  const auto s = score(model, ds);
  MetricsBundle b;
  b.family = std::string(models::to_string(model.spec.family));
  b.model_name = b.family;
  b.horizon_hours = model.horizon_hours;
  b.windows = s.scores.size();
  b.prevalence = static_cast<double>(s.positives()) / static_cast<double>(s.scores.size());
  b.roc = roc_auc(s);
  b.pr = pr_ap(s);
  b.auroc = b.roc.auc;
  b.aupr = b.pr.average_precision;
  b.operating = threshold_at_sensitivity(s, options.target_sensitivity);
  b.calibration = calibration_table(s);
  if (options.measure_latency) b.resources = measure_latency(model, ds, options.latency_repeats, options.latency_warmup);
  b.resources.size_bytes = size_bytes;
  return b;
}

}  // namespace pulsegate::eval
