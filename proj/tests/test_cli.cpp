#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "doctest.h"
#include "pulsegate/cli.hpp"
#include "pulsegate/container.hpp"
#include "pulsegate/models.hpp"
#include "pulsegate/windowing.hpp"

namespace fs = std::filesystem;
using namespace pulsegate;

namespace {

struct Sandbox {
  fs::path root;
  Sandbox() : root(fs::temp_directory_path() / "pulsegate_cli_test") {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Sandbox() { fs::remove_all(root); }
  std::string operator/(const std::string& name) const { return (root / name).string(); }
};

int pg(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return code;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t rows(const fs::path& csv) {
  const auto text = slurp(csv);
  return static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')) - 1;
}

}  // namespace

TEST_CASE("config parsing") {
  const auto cfg = cli::parse_config("# header\nseed = 7\n\n  family=lstm   # trailing\nout = a b\n");
  CHECK(cfg.at("seed") == "7");
  CHECK(cfg.at("family") == "lstm");
  CHECK(cfg.at("out") == "a b");
  CHECK(cfg.size() == 3);
  CHECK_THROWS_AS(cli::parse_config("seed 7\n"), Error);
  CHECK_THROWS_AS(cli::parse_config("= 7\n"), Error);
}

TEST_CASE("exit code table") {
  CHECK(cli::exit_code_for(ErrorKind::ConfigError) == 2);
  CHECK(cli::exit_code_for(ErrorKind::IoError) == 3);
  CHECK(cli::exit_code_for(ErrorKind::ChecksumMismatch) == 3);
  CHECK(cli::exit_code_for(ErrorKind::EmptyPartition) == 3);
  CHECK(cli::exit_code_for(ErrorKind::NonFiniteLoss) == 4);
  CHECK(cli::exit_code_for(ErrorKind::AllDiverged) == 5);
  CHECK(cli::exit_code_for(ErrorKind::HorizonMismatch) == 6);
}

TEST_CASE("argument errors") {
  CHECK(pg({}) == 2);
  CHECK(pg({"nonsense"}) == 2);
  CHECK(pg({"--help"}) == 0);
  Sandbox box;
  CHECK(pg({"preprocess", "--config", box / "missing.cfg"}) == 2);
  CHECK(pg({"preprocess", "--horizon", "2", "--out", box / "x"}) == 2);
  CHECK(pg({"preprocess", "--set", "noequals", "--out", box / "x"}) == 2);
  CHECK(pg({"preprocess", "--seed", "abc", "--out", box / "x"}) == 2);
}

TEST_CASE("preprocess: deterministic, counted, and reproducible from psv files") {
  Sandbox box;
  {
    std::ofstream cfg(box / "run.cfg");
    cfg << "seed = 7\nsynth.n_patients = 300\n";
  }
  REQUIRE(pg({"preprocess", "--config", box / "run.cfg", "--out", box / "a"}) == 0);
  REQUIRE(pg({"preprocess", "--config", box / "run.cfg", "--out", box / "b"}) == 0);
  for (const char* f : {"train.csv", "val.csv", "test.csv", "partition.json"})
    CHECK(slurp(box.root / "a" / f) == slurp(box.root / "b" / f));

  const auto m = nlohmann::json::parse(slurp(box.root / "a" / "manifest.json"));
  const auto& c = m["counts"];
  CHECK(c["patients_parsed"].get<int>() == 300);
  CHECK(c["cohort_kept"].get<int>() <= c["patients_parsed"].get<int>());
  CHECK(c["windows_extracted"].get<int>() <= c["cohort_kept"].get<int>());
  CHECK(c["windows_gated"].get<int>() <= c["windows_extracted"].get<int>());
  CHECK(c["windows_imputed"].get<int>() == c["windows_gated"].get<int>());
  const auto total = rows(box.root / "a" / "train.csv") + rows(box.root / "a" / "val.csv") +
                     rows(box.root / "a" / "test.csv");
  CHECK(c["windows_balanced"].get<std::size_t>() == total);
  CHECK(m["artifacts"]["train.csv"]["bytes"].get<std::size_t>() == fs::file_size(box.root / "a" / "train.csv"));

  REQUIRE(pg({"synth", "--config", box / "run.cfg", "--out", box / "cohort"}) == 0);
  REQUIRE(pg({"preprocess", "--seed", "7", "--set", "source=psv", "--data-dir", box / "cohort/psv", "--out",
              box / "from_psv"}) == 0);
  CHECK(slurp(box.root / "from_psv" / "test.csv") == slurp(box.root / "a" / "test.csv"));

  fs::create_directories(box.root / "empty");
  CHECK(pg({"preprocess", "--set", "source=psv", "--data-dir", box / "empty", "--out", box / "c"}) == 3);
  CHECK_FALSE(fs::exists(box.root / "c" / "train.csv"));
}

TEST_CASE("train, transfer, evaluate, profile") {
  Sandbox box;
  REQUIRE(pg({"preprocess", "--seed", "3", "--set", "synth.n_patients=250", "--out", box / "d1"}) == 0);
  REQUIRE(pg({"preprocess", "--seed", "3", "--set", "synth.n_patients=250", "--horizon", "4", "--partition",
              box / "d1/partition.json", "--out", box / "d4"}) == 0);

  SUBCASE("mlp default epochs") {
    REQUIRE(pg({"train", "--family", "mlp", "--data", box / "d1", "--out", box / "mlp", "--set", "widths=4,4,4"}) == 0);
    CHECK(rows(box.root / "mlp" / "train_log.csv") == 390);
  }

  SUBCASE("reference lstm spec in the header, reproducible bytes") {
    const std::vector<std::string> args{"train", "--family", "lstm", "--data", box / "d1", "--set", "train.epochs=1",
                                        "--seed", "5"};
    auto a = args, b = args;
    a.insert(a.end(), {"--out", box / "l1"});
    b.insert(b.end(), {"--out", box / "l2"});
    REQUIRE(pg(a) == 0);
    REQUIRE(pg(b) == 0);
    const auto bytes = container::read_file(box / "l1/model.bin");
    CHECK(bytes == container::read_file(box / "l2/model.bin"));
    const auto frame = container::read_frame(bytes);
    CHECK(models::ModelSpec::from_json(frame.spec_json).layer_widths == std::vector<int>{48, 108, 52, 20});
  }

  SUBCASE("transfer and evaluation") {
    REQUIRE(pg({"train", "--family", "lstm", "--data", box / "d1", "--out", box / "m", "--set", "widths=6,6,6,6",
                "--set", "train.epochs=4"}) == 0);
    REQUIRE(pg({"transfer", "--model", box / "m/model.bin", "--data", box / "d4", "--out", box / "t"}) == 0);
    CHECK(rows(box.root / "t" / "train_log.csv") == 50);
    CHECK(fs::exists(box.root / "t" / "report" / "metrics.json"));
    CHECK(models::deserialize(container::read_file(box / "t/model.bin")).horizon_hours == 4);
    CHECK(pg({"transfer", "--model", box / "t/model.bin", "--data", box / "d4", "--out", box / "t2"}) == 6);

    REQUIRE(pg({"evaluate", "--model", box / "m/model.bin", "--data", box / "d1", "--out", box / "e", "--repeats",
                "2"}) == 0);
    const auto metrics = nlohmann::json::parse(slurp(box.root / "e" / "metrics.json"));
    for (const char* key : {"auroc", "aupr", "sensitivity", "specificity", "accuracy", "size_kb", "execution_time_ms"})
      CHECK(metrics.contains(key));
    REQUIRE(pg({"evaluate", "--model", box / "m/model.bin", "--data", box / "d1", "--out", box / "e2", "--repeats",
                "2"}) == 0);
    for (const char* f : {"roc.csv", "pr.csv", "calibration.csv"})
      CHECK(slurp(box.root / "e" / f) == slurp(box.root / "e2" / f));
    CHECK(pg({"evaluate", "--model", box / "m/model.bin", "--data", box / "d4", "--out", box / "e3"}) == 6);
    CHECK(pg({"evaluate", "--model", box / "none.bin", "--data", box / "d1", "--out", box / "e4"}) == 3);

    REQUIRE(pg({"profile", "--model", box / "m/model.bin", "--data", box / "d1", "--out", box / "p", "--repeats",
                "7"}) == 0);
    const auto prof = nlohmann::json::parse(slurp(box.root / "p" / "profile.json"));
    CHECK(prof["size_bytes"].get<std::uintmax_t>() == fs::file_size(box.root / "m" / "model.bin"));
    CHECK(prof["latency_samples"].get<int>() == 7);
    CHECK(prof["mean_latency_ms"].get<double>() > 0.0);
    CHECK(pg({"profile", "--model", box / "none.bin", "--data", box / "d1", "--out", box / "p2"}) == 3);
  }
}

TEST_CASE("optimize in surrogate mode") {
  Sandbox box;
  REQUIRE(pg({"optimize", "--family", "mlp", "--surrogate", "--seed", "2", "--out", box / "ga"}) == 0);
  CHECK(rows(box.root / "ga" / "history.jsonl") + 1 == 15 * 20);
  const auto spec = models::ModelSpec::from_json(slurp(box.root / "ga" / "best_spec.json"));
  CHECK(spec.family == models::Family::mlp);
  spec.validate();
  CHECK(pg({"optimize", "--family", "lstm", "--surrogate", "--set", "ga.target=1,2", "--out", box / "bad"}) == 2);
  CHECK(pg({"optimize", "--family", "mlp", "--surrogate", "--set", "ga.population=1", "--out", box / "bad"}) == 2);
}
