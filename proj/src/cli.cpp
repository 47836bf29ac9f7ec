#include "pulsegate/cli.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>

#include <CLI11.hpp>
#include <json.hpp>

#include "pulsegate/container.hpp"
#include "pulsegate/crc32c.hpp"
#include "pulsegate/eval.hpp"
#include "pulsegate/gaopt.hpp"
#include "pulsegate/ingest.hpp"
#include "pulsegate/models.hpp"
#include "pulsegate/windowing.hpp"

namespace pulsegate::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr const char* kToolVersion = "0.1.0";

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::span<const std::byte> as_bytes(const std::string& s) { return std::as_bytes(std::span(s.data(), s.size())); }

std::string as_text(const std::vector<std::byte>& b) {
  return std::string(reinterpret_cast<const char*>(b.data()), b.size());
}

class Run {
 public:
  Run(std::string command, Config cfg, std::ostream& log)
      : command_(std::move(command)), cfg_(std::move(cfg)), log_(log), start_(std::chrono::steady_clock::now()) {
    seed_ = static_cast<std::uint64_t>(integer("seed", 0));
    out_ = str("out", "out");
  }

  bool has(const std::string& key) const { return cfg_.count(key) > 0; }

  std::string str(const std::string& key, const std::string& fallback) const {
    auto it = cfg_.find(key);
    return it == cfg_.end() ? fallback : it->second;
  }

  std::string require(const std::string& key) const {
    auto it = cfg_.find(key);
    if (it == cfg_.end() || it->second.empty()) throw Error(ErrorKind::ConfigError, "missing required key '" + key + "'");
    return it->second;
  }

  long long integer(const std::string& key, long long fallback) const {
    if (!has(key)) return fallback;
    const auto& v = cfg_.at(key);
    long long out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
      throw Error(ErrorKind::ConfigError, "key '" + key + "' needs an integer, got '" + v + "'");
    return out;
  }

  double real(const std::string& key, double fallback) const {
    if (!has(key)) return fallback;
    const auto& v = cfg_.at(key);
    double out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || p != v.data() + v.size())
      throw Error(ErrorKind::ConfigError, "key '" + key + "' needs a number, got '" + v + "'");
    return out;
  }

  std::vector<int> int_list(const std::string& key) const {
    std::vector<int> out;
    std::string_view v = cfg_.at(key);
    while (!v.empty()) {
      const auto comma = v.find(',');
      const auto item = trim(v.substr(0, comma));
      int x = 0;
      auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), x);
      if (item.empty() || ec != std::errc() || p != item.data() + item.size())
        throw Error(ErrorKind::ConfigError, "key '" + key + "' needs a comma-separated integer list");
      out.push_back(x);
      if (comma == std::string_view::npos) break;
      v.remove_prefix(comma + 1);
    }
    return out;
  }

  int horizon() const {
    const auto h = integer("horizon", 1);
    if (h != 1 && h != 4) throw Error(ErrorKind::ConfigError, "horizon must be 1 or 4");
    return static_cast<int>(h);
  }

  std::uint64_t seed(std::string_view stage) const { return derive_seed(seed_, stage); }
  std::uint64_t global_seed() const { return seed_; }
  fs::path path(const std::string& name) const { return fs::path(out_) / name; }
  std::ostream& log() { return log_; }

  void write(const std::string& name, std::span<const std::byte> data) {
    container::write_file_atomic(path(name).string(), data);
    char crc[9];
    std::snprintf(crc, sizeof crc, "%08x", crc32c(data));
    artifacts_[name] = {{"bytes", data.size()}, {"crc32c", crc}};
  }
  void write(const std::string& name, const std::string& text) { write(name, as_bytes(text)); }
  void note(const std::string& key, json value) { extra_[key] = std::move(value); }

  void finish() {
    json m;
    m["tool"] = "pulsegate";
    m["version"] = kToolVersion;
    m["command"] = command_;
    m["seed"] = seed_;
    m["config"] = json(cfg_);
    for (auto& [k, v] : extra_.items()) m[k] = v;
    m["artifacts"] = artifacts_;
    m["elapsed_ms"] =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
    const auto text = m.dump(2) + "\n";
    container::write_file_atomic(path("manifest.json").string(), as_bytes(text));
    log_ << command_ << ": wrote " << artifacts_.size() << " artifacts to " << out_ << "\n";
  }

 private:
  std::string command_;
  Config cfg_;
  std::ostream& log_;
  std::chrono::steady_clock::time_point start_;
  std::uint64_t seed_ = 0;
  std::string out_;
  json artifacts_ = json::object();
  json extra_ = json::object();
};

// ---------------------------------------------------------------------------
// data loading

std::vector<ingest::RawPatientRecord> load_records(const Run& run) {
  const auto source = run.str("source", "synthetic");
  if (source == "psv") {
    const auto dir = run.require("data_dir");
    if (!fs::is_directory(dir)) throw Error(ErrorKind::IoError, "no such directory: " + dir);
    auto records = ingest::read_psv_directory(dir);
    if (records.empty()) throw Error(ErrorKind::IoError, "no .psv files in " + dir);
    return records;
  }
  if (source != "synthetic") throw Error(ErrorKind::ConfigError, "source must be 'psv' or 'synthetic'");
  windowing::SyntheticCohortParams p;
  p.n_patients = static_cast<std::size_t>(run.integer("synth.n_patients", static_cast<long long>(p.n_patients)));
  p.sepsis_fraction = run.real("synth.sepsis_fraction", p.sepsis_fraction);
  p.baseline_hr_mean = run.real("synth.baseline_hr_mean", p.baseline_hr_mean);
  p.baseline_hr_sd = run.real("synth.baseline_hr_sd", p.baseline_hr_sd);
  p.drift_per_hour = run.real("synth.drift_per_hour", p.drift_per_hour);
  p.missing_rate = run.real("synth.missing_rate", p.missing_rate);
  p.seed = run.seed("synth");
  return windowing::synthesize_cohort(p);
}

windowing::LabeledDataset load_csv(const fs::path& path) {
  return windowing::read_dataset_csv(as_text(container::read_file(path.string())));
}

struct Splits {
  windowing::LabeledDataset train, val, test;
};

Splits load_splits(const Run& run) {
  const fs::path dir = run.require("data");
  return {load_csv(dir / "train.csv"), load_csv(dir / "val.csv"), load_csv(dir / "test.csv")};
}

void check_horizon(const Run& run, int actual, const std::string& what) {
  if (run.has("horizon") && run.horizon() != actual)
    throw Error(ErrorKind::HorizonMismatch, what + " has horizon " + std::to_string(actual) + "h, config asks for " +
                                                std::to_string(run.horizon()) + "h");
}

models::TrainedModel load_model(const Run& run, std::vector<std::byte>* bytes_out = nullptr) {
  auto bytes = container::read_file(run.require("model"));
  auto model = models::deserialize(bytes);
  if (bytes_out) *bytes_out = std::move(bytes);
  return model;
}

json counts_json(const windowing::StageCounts& c) {
  return {{"patients_parsed", c.patients_parsed}, {"cohort_kept", c.cohort_kept},
          {"windows_extracted", c.windows_extracted}, {"windows_gated", c.windows_gated},
          {"windows_imputed", c.windows_imputed}, {"windows_balanced", c.windows_balanced}};
}

std::string train_log_csv(const models::TrainedModel& m) {
  std::string out = "epoch,train_loss,val_loss\n";
  for (std::size_t i = 0; i < m.train_log.size(); ++i) {
    out += std::to_string(i + 1) + ',' + eval::format_number(m.train_log[i]) + ',';
    if (i < m.val_log.size()) out += eval::format_number(m.val_log[i]);
    out += '\n';
  }
  return out;
}

eval::EvaluateOptions eval_options(const Run& run) {
  eval::EvaluateOptions o;
  o.latency_repeats = static_cast<int>(run.integer("profile.repeats", o.latency_repeats));
  o.latency_warmup = static_cast<int>(run.integer("profile.warmup", o.latency_warmup));
  return o;
}

void emit_eval(Run& run, const models::TrainedModel& model, const windowing::LabeledDataset& ds,
               std::size_t size_bytes, const std::string& dir) {
  const auto bundle = eval::evaluate(model, ds, size_bytes, eval_options(run));
  run.write(dir + "/metrics.json", eval::metrics_json(bundle));
  run.write(dir + "/roc.csv", eval::curve_csv(bundle.roc.points));
  run.write(dir + "/pr.csv", eval::curve_csv(bundle.pr.points));
  run.write(dir + "/calibration.csv", eval::calibration_csv(bundle.calibration));
  run.write(dir + "/curves.svg", eval::curves_svg(bundle));
  run.log() << "  auroc " << bundle.auroc << "  aupr " << bundle.aupr << "  specificity "
            << bundle.operating.specificity << "\n";
}

// ---------------------------------------------------------------------------
// commands

void cmd_synth(Run& run) {
  const auto records = load_records(run);
  for (const auto& r : records) run.write("psv/" + r.patient_id + ".psv", ingest::write_psv(r));
  run.note("counts", {{"patients_synthesized", records.size()}});
  run.finish();
}

void cmd_preprocess(Run& run) {
  const auto records = load_records(run);
  const int h = run.horizon();
  const double target = run.real("balance.target", 0.30);
  windowing::PreprocessResult res;
  if (run.has("partition")) {
    const auto j = nlohmann::json::parse(as_text(container::read_file(run.require("partition"))));
    windowing::SplitResult reference;
    reference.train_patients = j.at("train").get<std::vector<std::string>>();
    reference.val_patients = j.at("val").get<std::vector<std::string>>();
    reference.test_patients = j.at("test").get<std::vector<std::string>>();
    const auto ds = windowing::build_dataset(records, h, &res.counts);
    res.split = windowing::apply_partition(ds, reference);
    Rng rng(derive_seed(run.global_seed(), "balance"));
    res.split.train = windowing::balance_dataset(std::move(res.split.train), rng, target);
    res.counts.windows_balanced =
        res.split.train.windows.size() + res.split.val.windows.size() + res.split.test.windows.size();
  } else {
    windowing::SplitSpec spec;
    spec.train_fraction = run.real("split.train", spec.train_fraction);
    spec.val_fraction = run.real("split.val", spec.val_fraction);
    spec.test_fraction = run.real("split.test", spec.test_fraction);
    spec.seed = run.seed("split");
    res = windowing::preprocess(records, h, spec, run.global_seed(), target);
  }
  run.write("train.csv", windowing::write_dataset_csv(res.split.train));
  run.write("val.csv", windowing::write_dataset_csv(res.split.val));
  run.write("test.csv", windowing::write_dataset_csv(res.split.test));
  const json partition{{"train", res.split.train_patients}, {"val", res.split.val_patients},
                       {"test", res.split.test_patients}};
  run.write("partition.json", partition.dump(1) + "\n");
  run.note("horizon_hours", h);
  run.note("counts", counts_json(res.counts));
  run.note("split_windows",
           {{"train", res.split.train.windows.size()}, {"val", res.split.val.windows.size()},
            {"test", res.split.test.windows.size()}});
  run.finish();
}

models::ModelSpec configured_spec(const Run& run, models::Family family) {
  if (run.has("spec")) {
    auto spec = models::ModelSpec::from_json(as_text(container::read_file(run.require("spec"))));
    if (spec.family != family && run.has("family"))
      throw Error(ErrorKind::ConfigError, "spec file family differs from the configured family");
    return spec;
  }
  auto spec = models::reference_spec(family);
  if (run.has("widths")) spec.layer_widths = run.int_list("widths");
  return spec;
}

models::Family configured_family(const Run& run) {
  if (!run.has("family") && run.has("spec"))
    return models::ModelSpec::from_json(as_text(container::read_file(run.require("spec")))).family;
  try {
    return models::family_from_string(run.require("family"));
  } catch (const Error& e) {
    throw Error(ErrorKind::ConfigError, e.what());
  }
}

void cmd_train(Run& run) {
  const auto family = configured_family(run);
  const auto spec = configured_spec(run, family);
  try {
    spec.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::ConfigError, e.what());
  }
  const auto data = load_splits(run);
  check_horizon(run, data.train.horizon_hours, "dataset");
  auto cfg = models::TrainConfig::defaults(spec.family);
  cfg.epochs = static_cast<int>(run.integer("train.epochs", cfg.epochs));
  cfg.batch_size = static_cast<int>(run.integer("train.batch_size", cfg.batch_size));
  cfg.learning_rate = run.real("train.learning_rate", cfg.learning_rate);
  cfg.shuffle_seed = run.seed("train");
  run.log() << "train: " << models::to_string(spec.family) << " for " << cfg.epochs << " epochs on "
            << data.train.windows.size() << " windows\n";
  const auto model = models::train(models::build(spec, run.seed("model")), data.train, data.val, cfg);
  const auto bytes = models::serialize(model);
  run.write("model.bin", bytes);
  run.write("train_log.csv", train_log_csv(model));
  emit_eval(run, model, data.test, bytes.size(), "report");
  run.finish();
}

void cmd_optimize(Run& run) {
  const auto family = configured_family(run);
  gaopt::GaConfig ga;
  ga.population_size = static_cast<int>(run.integer("ga.population", ga.population_size));
  ga.generations = static_cast<int>(run.integer("ga.generations", ga.generations));
  ga.crossover_prob = run.real("ga.crossover_prob", ga.crossover_prob);
  ga.mutation_prob_per_bit = run.real("ga.mutation_prob", ga.mutation_prob_per_bit);
  ga.elite_count = static_cast<int>(run.integer("ga.elite", ga.elite_count));
  ga.candidate_epochs = static_cast<int>(run.integer("ga.candidate_epochs", ga.candidate_epochs));
  ga.latency_repeats = static_cast<int>(run.integer("ga.latency_repeats", ga.latency_repeats));
  ga.seed = run.seed("ga");
  try {
    ga.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::ConfigError, e.what());
  }

  gaopt::GaResult result;
  if (run.integer("ga.surrogate", 0) != 0) {
    std::vector<int> target;
    if (run.has("ga.target")) {
      target = run.int_list("ga.target");
    } else if (family == models::Family::gbdt) {
      target = {29, 247, 82};
    } else {
      target = models::reference_spec(family).layer_widths;
    }
    try {
      result = gaopt::run_ga(family, gaopt::surrogate_evaluator(family, target), ga);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::WidthMismatch) throw Error(ErrorKind::ConfigError, e.what());
      throw;
    }
    run.note("surrogate_target", target);
  } else {
    const auto data = load_splits(run);
    check_horizon(run, data.train.horizon_hours, "dataset");
    run.log() << "optimize: " << models::to_string(family) << ", " << ga.population_size << " x " << ga.generations
              << " candidates\n";
    result = gaopt::run_ga(family, gaopt::SearchData{data.train, data.val}, ga);
  }
  run.write("history.jsonl", gaopt::history_jsonl(result));
  run.write("best_spec.json", result.best.spec.to_json() + "\n");
  run.note("best", {{"gene", result.best.gene.hex()},
                    {"generation", result.best.generation},
                    {"rank_avg", result.best.rank_avg}});
  run.log() << "  best gene " << result.best.gene.hex() << " from generation " << result.best.generation << "\n";
  run.finish();
}

void cmd_transfer(Run& run) {
  auto model = load_model(run);
  const auto data = load_splits(run);
  const int epochs =
      static_cast<int>(run.integer("epochs", models::default_fine_tune_epochs(model.spec.family)));
  run.log() << "transfer: " << models::to_string(model.spec.family) << " for " << epochs << " epochs\n";
  model = models::fine_tune(std::move(model), data.train, epochs, run.seed("transfer"));
  const auto bytes = models::serialize(model);
  run.write("model.bin", bytes);
  run.write("train_log.csv", train_log_csv(model));
  emit_eval(run, model, data.test, bytes.size(), "report");
  run.finish();
}

windowing::LabeledDataset configured_dataset(const Run& run) {
  if (run.has("dataset")) return load_csv(run.require("dataset"));
  return load_csv(fs::path(run.require("data")) / "test.csv");
}

void cmd_evaluate(Run& run) {
  std::vector<std::byte> bytes;
  const auto model = load_model(run, &bytes);
  const auto ds = configured_dataset(run);
  if (ds.horizon_hours != model.horizon_hours)
    throw Error(ErrorKind::HorizonMismatch, "model horizon " + std::to_string(model.horizon_hours) +
                                                "h, dataset horizon " + std::to_string(ds.horizon_hours) + "h");
  emit_eval(run, model, ds, eval::measure_size(bytes), ".");
  run.finish();
}

void cmd_profile(Run& run) {
  std::vector<std::byte> bytes;
  const auto model = load_model(run, &bytes);
  const auto ds = configured_dataset(run);
  const auto opt = eval_options(run);
  auto p = eval::measure_latency(model, ds, opt.latency_repeats, opt.latency_warmup);
  p.size_bytes = eval::measure_size(bytes);
  json j;
  j["model"] = run.require("model");
  j["family"] = models::to_string(model.spec.family);
  j["horizon_hours"] = model.horizon_hours;
  j["windows"] = ds.windows.size();
  j["size_bytes"] = p.size_bytes;
  j["size_kb"] = static_cast<double>(p.size_bytes) / 1024.0;
  j["mean_latency_ms"] = p.mean_latency_ms;
  j["latency_samples"] = p.latency_samples;
  j["warmup_discarded"] = p.warmup_discarded;
  run.write("profile.json", j.dump(2) + "\n");
  run.log() << "profile: " << p.mean_latency_ms << " ms per prediction, " << p.size_bytes << " bytes\n";
  run.finish();
}

}  // namespace

int exit_code_for(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::ConfigError:
    case ErrorKind::BadSpec: return kConfig;
    case ErrorKind::NonFiniteLoss:
    case ErrorKind::DegenerateBatch:
    case ErrorKind::KernelTooLarge:
    case ErrorKind::SingleClass:
    case ErrorKind::NoPositives: return kNumeric;
    case ErrorKind::AllDiverged:
    case ErrorKind::WidthMismatch: return kSearch;
    case ErrorKind::HorizonMismatch: return kHorizon;
    default: return kData;
  }
}

Config parse_config(std::string_view text) {
  Config cfg;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos || trim(line.substr(0, eq)).empty())
      throw Error(ErrorKind::ConfigError, "config line " + std::to_string(line_no) + ": expected key = value");
    cfg[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return cfg;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sepsis early-warning models from hourly heart rate", "pulsegate"};
  app.require_subcommand(1);

  struct Common {
    std::string config_path;
    std::map<std::string, std::string> flags;
    std::vector<std::string> sets;
    bool surrogate = false;
  };
  std::map<std::string, Common> common;
  std::map<std::string, std::function<void(Run&)>> handlers{
      {"synth", cmd_synth},         {"preprocess", cmd_preprocess}, {"train", cmd_train},
      {"optimize", cmd_optimize},   {"transfer", cmd_transfer},     {"evaluate", cmd_evaluate},
      {"profile", cmd_profile}};
  const std::map<std::string, std::string> descriptions{
      {"synth", "Write a synthetic cohort as .psv files"},
      {"preprocess", "Ingest, window, split and balance into train/val/test CSVs"},
      {"train", "Train a model on a preprocessed dataset and report on its test split"},
      {"optimize", "Genetic search over widths or boosting hyperparameters"},
      {"transfer", "Fine-tune a 1-hour model on 4-hour data"},
      {"evaluate", "Metrics, curves and calibration for a model on a dataset"},
      {"profile", "Latency and size of a model"}};
  // flag name -> config key
  const std::vector<std::pair<std::string, std::string>> keyed{
      {"--seed", "seed"},   {"--out", "out"},         {"--horizon", "horizon"}, {"--family", "family"},
      {"--data", "data"},   {"--data-dir", "data_dir"}, {"--model", "model"},   {"--dataset", "dataset"},
      {"--epochs", "epochs"}, {"--repeats", "profile.repeats"}, {"--spec", "spec"}, {"--partition", "partition"}};

  for (const auto& [name, desc] : descriptions) {
    auto* sub = app.add_subcommand(name, desc);
    auto& c = common[name];
    sub->add_option("--config", c.config_path, "key = value config file");
    for (const auto& [flag, key] : keyed) sub->add_option(flag, c.flags[key], "sets '" + key + "'");
    sub->add_option("--set", c.sets, "override any config key (key=value)");
    if (name == "optimize") sub->add_flag("--surrogate", c.surrogate, "deterministic stand-in fitness");
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kConfig;
  }

  const auto* sub = app.get_subcommands().front();
  const auto name = sub->get_name();
  auto& c = common[name];
  try {
    Config cfg;
    if (!c.config_path.empty()) {
      std::vector<std::byte> text;
      try {
        text = container::read_file(c.config_path);
      } catch (const Error&) {
        throw Error(ErrorKind::ConfigError, "cannot read config " + c.config_path);
      }
      cfg = parse_config(as_text(text));
    }
    for (const auto& [flag, key] : keyed)
      if (sub->count(flag)) cfg[key] = c.flags[key];
    for (const auto& s : c.sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw Error(ErrorKind::ConfigError, "--set needs key=value, got '" + s + "'");
      cfg[trim(std::string_view(s).substr(0, eq))] = trim(std::string_view(s).substr(eq + 1));
    }
    if (c.surrogate) cfg["ga.surrogate"] = "1";
    Run r(name, cfg, out);
    handlers.at(name)(r);
    return kOk;
  } catch (const Error& e) {
    err << "pulsegate " << name << ": " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const nlohmann::json::exception& e) {
    err << "pulsegate " << name << ": " << e.what() << "\n";
    return kConfig;
  }
}

}  // namespace pulsegate::cli
