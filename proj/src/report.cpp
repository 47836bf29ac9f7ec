#include <charconv>
#include <cmath>
#include <filesystem>
#include <sstream>

#include <json.hpp>

#include "pulsegate/container.hpp"
#include "pulsegate/error.hpp"
#include "pulsegate/eval.hpp"

namespace pulsegate::eval {

namespace {

nlohmann::ordered_json number_or_null(double v) {
  return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  container::write_file_atomic(path.string(), std::as_bytes(std::span(text.data(), text.size())));
}

struct Panel {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<std::pair<double, double>> points;
  bool diagonal = false;
};

constexpr double kPanel = 260.0;
constexpr double kMargin = 40.0;

std::string polyline(const Panel& panel, double x0) {
  std::ostringstream out;
  out << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"";
  bool first = true;
  for (const auto& [x, y] : panel.points) {
    if (!first) out << ' ';
    first = false;
    out << format_number(std::round((x0 + x * kPanel) * 100) / 100) << ','
        << format_number(std::round((kMargin + (1.0 - y) * kPanel) * 100) / 100);
  }
  out << "\"/>\n";
  return out.str();
}

}  // namespace

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string metrics_json(const MetricsBundle& b) {
  nlohmann::ordered_json j;
  j["model"] = b.model_name;
  j["family"] = b.family;
  j["horizon_hours"] = b.horizon_hours;
  j["windows"] = b.windows;
  j["prevalence"] = b.prevalence;
  j["auroc"] = b.auroc;
  j["aupr"] = b.aupr;
  j["threshold"] = number_or_null(b.operating.threshold);
  j["sensitivity"] = b.operating.sensitivity;
  j["specificity"] = b.operating.specificity;
  j["accuracy"] = b.operating.accuracy;
  j["size_bytes"] = b.resources.size_bytes;
  j["size_kb"] = static_cast<double>(b.resources.size_bytes) / 1024.0;
  j["execution_time_ms"] = b.resources.mean_latency_ms;
  j["latency_samples"] = b.resources.latency_samples;
  j["warmup_discarded"] = b.resources.warmup_discarded;
  auto& cal = j["calibration"] = nlohmann::ordered_json::array();
  for (const auto& bin : b.calibration) {
    cal.push_back({{"bin_lo", bin.lower},
                   {"bin_hi", bin.upper},
                   {"mean_pred", bin.mean_predicted ? nlohmann::ordered_json(*bin.mean_predicted) : nullptr},
                   {"obs_freq", bin.observed_frequency ? nlohmann::ordered_json(*bin.observed_frequency) : nullptr},
                   {"count", bin.count}});
  }
  return j.dump(2) + "\n";
}

std::string curve_csv(const std::vector<CurvePoint>& points) {
  std::string out = "threshold,x,y\n";
  for (const auto& p : points) out += format_number(p.threshold) + ',' + format_number(p.x) + ',' + format_number(p.y) + '\n';
  return out;
}

std::string calibration_csv(const std::vector<CalibrationBin>& bins) {
  std::string out = "bin_lo,bin_hi,mean_pred,obs_freq,count\n";
  for (const auto& b : bins) {
    out += format_number(b.lower) + ',' + format_number(b.upper) + ',';
    out += (b.mean_predicted ? format_number(*b.mean_predicted) : std::string()) + ',';
    out += (b.observed_frequency ? format_number(*b.observed_frequency) : std::string()) + ',';
    out += std::to_string(b.count) + '\n';
  }
  return out;
}

std::string curves_svg(const MetricsBundle& b) {
  std::vector<Panel> panels(3);
  panels[0] = {"ROC (AUROC " + format_number(std::round(b.auroc * 1000) / 1000) + ")", "FPR", "TPR", {}, true};
  for (const auto& p : b.roc.points) panels[0].points.emplace_back(p.x, p.y);
  panels[1] = {"PR (AP " + format_number(std::round(b.aupr * 1000) / 1000) + ")", "Recall", "Precision", {}, false};
  for (const auto& p : b.pr.points) panels[1].points.emplace_back(p.x, p.y);
  panels[2] = {"Calibration", "Mean predicted", "Observed", {}, true};
  for (const auto& bin : b.calibration)
    if (bin.count) panels[2].points.emplace_back(*bin.mean_predicted, *bin.observed_frequency);

  const double width = 3 * (kPanel + 2 * kMargin);
  const double height = kPanel + 2 * kMargin + 10;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t i = 0; i < panels.size(); ++i) {
    const auto& panel = panels[i];
    const double x0 = static_cast<double>(i) * (kPanel + 2 * kMargin) + kMargin;
    svg << "<rect x=\"" << x0 << "\" y=\"" << kMargin << "\" width=\"" << kPanel << "\" height=\"" << kPanel
        << "\" fill=\"none\" stroke=\"#444\"/>\n";
    if (panel.diagonal)
      svg << "<line x1=\"" << x0 << "\" y1=\"" << kMargin + kPanel << "\" x2=\"" << x0 + kPanel << "\" y2=\"" << kMargin
          << "\" stroke=\"#bbb\" stroke-dasharray=\"4 3\"/>\n";
    svg << polyline(panel, x0);
    svg << "<text x=\"" << x0 + kPanel / 2 << "\" y=\"" << kMargin - 12 << "\" text-anchor=\"middle\" font-size=\"13\">"
        << panel.title << "</text>\n";
    svg << "<text x=\"" << x0 + kPanel / 2 << "\" y=\"" << kMargin + kPanel + 24 << "\" text-anchor=\"middle\">"
        << panel.x_label << "</text>\n";
    svg << "<text transform=\"translate(" << x0 - 24 << ',' << kMargin + kPanel / 2
        << ") rotate(-90)\" text-anchor=\"middle\">" << panel.y_label << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

void emit_report(const MetricsBundle& bundle, const std::string& out_dir) {
  namespace fs = std::filesystem;
  const fs::path dir(out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::IoError, "cannot create " + out_dir + ": " + ec.message());
  write_text(dir / "metrics.json", metrics_json(bundle));
  write_text(dir / "roc.csv", curve_csv(bundle.roc.points));
  write_text(dir / "pr.csv", curve_csv(bundle.pr.points));
  write_text(dir / "calibration.csv", calibration_csv(bundle.calibration));
  write_text(dir / "curves.svg", curves_svg(bundle));
}

}  // namespace pulsegate::eval
