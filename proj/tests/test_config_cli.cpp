#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <fstream>

#include "doctest.h"
#include "helpers.hpp"
#include "miseg/config.hpp"

using namespace miseg;
using namespace miseg::test;

TEST_CASE("defaults parse and validate") {
  const RunConfig cfg = RunConfig::from_json_text("{}");
  CHECK(cfg.seed == 42);
  CHECK(cfg.train.net.depth == 3);
  CHECK(cfg.train.patch_size == std::array<int64_t, 3>{16, 32, 32});
  CHECK(cfg.sweep.noise_stds.size() == 5);
  CHECK_FALSE(cfg.train.afa.has_value());
}

TEST_CASE("the afa section enables the augmented objective with paper defaults") {
  const RunConfig cfg = RunConfig::from_json_text(R"({"afa": {}})");
  REQUIRE(cfg.train.afa.has_value());
  CHECK(cfg.train.afa->epsilon == 0.003);
  CHECK(cfg.train.afa->ratios == std::vector<double>{0.1, 0.05, 0.025, 0.0125});
  CHECK(cfg.train.afa->resolved_layer(cfg.train.net.depth) == 2);
}

TEST_CASE("unknown keys are rejected by name") {
  try {
    RunConfig::from_json_text(R"({"afa": {"epzilon": 0.1}})");
    FAIL("expected a validation error");
  } catch (const ValidationError& e) {
    CHECK(std::string(e.what()).find("epzilon") != std::string::npos);
  }
  CHECK_THROWS_AS(RunConfig::from_json_text(R"({"trian": {}})"), ValidationError);
  CHECK_THROWS_AS(RunConfig::from_json_text(R"({"sweep": {"overlp": 0.5}})"), ValidationError);
}

TEST_CASE("invalid values are rejected") {
  CHECK_THROWS_AS(RunConfig::from_json_text(R"({"loss": {"gamma": 1.5}})"), ValidationError);
  CHECK_THROWS_AS(RunConfig::from_json_text(R"({"sweep": {"overlap": 1.0}})"), ValidationError);
  CHECK_THROWS_AS(RunConfig::from_json_text(R"({"train": {"iterations": 0}})"), ValidationError);
  CHECK_THROWS_AS(RunConfig::from_json_text(R"({"net": {"depth": 1}})"), ValidationError);
  CHECK_THROWS_AS(RunConfig::from_json_text("not json"), ValidationError);
}

TEST_CASE("the single seed reaches phantom and training configs") {
  const RunConfig cfg = RunConfig::from_json_text(R"({"seed": 1234})");
  CHECK(cfg.phantom.seed == 1234);
  CHECK(cfg.train.seed == 1234);
}

// Subprocess-level checks of the command line tool. The binary path arrives
// through the MISEG_BIN environment variable set by the test harness.
namespace {

int run_cli(const std::string& args) {
  const char* bin = std::getenv("MISEG_BIN");
  REQUIRE(bin != nullptr);
  const int rc = std::system((std::string(bin) + " " + args + " >/dev/null 2>&1").c_str());
  return WEXITSTATUS(rc);
}

}  // namespace

TEST_CASE("cli: unknown subcommands and bad configs exit 2") {
  CHECK(run_cli("definitely-not-a-command") == 2);
  TempDir tmp("cli");
  {
    std::ofstream out(tmp / "bad.json");
    out << R"({"afa": {"epzilon": 0.003}})";
  }
  CHECK(run_cli("train --config " + (tmp / "bad.json").string()) == 2);
  CHECK(run_cli("train --config /nonexistent.json") == 1);  // i/o, not validation
}

TEST_CASE("cli: gen-data, train, eval, compare pipeline round-trips") {
  TempDir tmp("pipe");
  const std::string cfg_path = (tmp / "cfg.json").string();
  {
    std::ofstream out(cfg_path);
    out << R"({
      "seed": 7,
      "phantom": {"dims": [8, 16, 16],
                  "organs": [{"label": 1, "intensity": [0.0, 0.1], "semi_axes": [2, 3]},
                             {"label": 2, "intensity": [0.15, 0.25], "semi_axes": [2, 3]}]},
      "dataset": {"n": 5, "dir": ")" << (tmp / "data").string() << R"("},
      "net": {"depth": 2, "base_channels": 4, "num_classes": 3},
      "train": {"iterations": 2, "patch_size": [8, 16, 16], "patches_per_scan": 2,
                "out_dir": ")" << (tmp / "run").string() << R"("},
      "sweep": {"noise_stds": [0, 0.01], "window": [8, 16, 16]}
    })";
  }
  CHECK(run_cli("gen-data --config " + cfg_path) == 0);
  CHECK(std::filesystem::exists(tmp / "data" / "manifest.json"));
  CHECK(run_cli("train --config " + cfg_path) == 0);
  const std::string ckpt = (tmp / "run" / "checkpoint_final.mickpt").string();
  CHECK(std::filesystem::exists(ckpt));
  CHECK(run_cli("eval --config " + cfg_path + " --checkpoint " + ckpt + " --out " +
                (tmp / "records.csv").string()) == 0);
  CHECK(run_cli("sweep --config " + cfg_path + " --checkpoint " + ckpt + " --out " +
                (tmp / "sweep.csv").string()) == 0);
  CHECK(run_cli("compare " + (tmp / "sweep.csv").string() + " " + (tmp / "sweep.csv").string() +
                " --out-prefix " + (tmp / "report").string()) == 0);
  CHECK(std::filesystem::exists(tmp / "report.csv"));
  CHECK(std::filesystem::exists(tmp / "report.json"));

  // identity comparison: all improvements zero, every p exactly 1
  std::ifstream rep(tmp / "report.csv");
  std::string line;
  std::getline(rep, line);  // header
  int rows = 0;
  while (std::getline(rep, line)) {
    if (line.empty()) continue;
    ++rows;
    // improvement is the 7th column, p the last
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    CHECK(std::stod(fields[6]) == 0.0);
    CHECK(std::stod(fields.back()) == 1.0);
  }
  CHECK(rows > 0);

  // predict on one of the generated images
  CHECK(run_cli("predict --config " + cfg_path + " --checkpoint " + ckpt + " --input " +
                (tmp / "data" / "img_0004.mivol").string() + " --output " +
                (tmp / "pred.mivol").string()) == 0);
  CHECK(std::filesystem::exists(tmp / "pred.mivol"));
}
