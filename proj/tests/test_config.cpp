#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "afu/errors.hpp"
#include "afu/experiment.hpp"

using namespace afu;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

int cli(const std::string& args) {
  const std::string cmd = std::string(AFU_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::filesystem::path scratch(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("afu_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("empty config gives the defaults") {
  const ExperimentConfig c = parse_config_text("");
  CHECK(c.federation.n_clients == 5);
  CHECK(c.federation.alpha == 1.0);
  CHECK(c.federation.batch_size == 128);
  CHECK(c.federation.post_rounds == 10);
  CHECK(c.unlearn.gamma_calib == 1.0);
  CHECK(c.seeds == std::vector<std::uint64_t>{0, 1, 2, 3, 4});
  CHECK(c.target == kLargestShard);
}

TEST_CASE("invalid values name the field") {
  try {
    parse_config_text("[federation]\nalpha = -1\n");
    FAIL("no error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("federation.alpha") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_config_text("[federation]\nbogus = 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("[nowhere]\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("[federation]\nrounds = two\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("[experiment]\nmethods = sgd\n"), ConfigError);
  ExperimentConfig c = parse_config_text("");
  CHECK_THROWS_AS(set_config_value(c, "unlearn.nothing", "1"), ConfigError);
}

TEST_CASE("serialize round trip") {
  ExperimentConfig c = parse_config_text("");
  set_config_value(c, "federation.alpha", "0.3");
  set_config_value(c, "federation.speed_factors", "1,1,1,1,4");
  set_config_value(c, "unlearn.gamma_calib", "5");
  set_config_value(c, "experiment.seeds", "2-4");
  set_config_value(c, "experiment.methods", "afu_ic,pga");
  const std::string text = serialize_config(c);
  const ExperimentConfig back = parse_config_text(text);
  CHECK(serialize_config(back) == text);
  CHECK(back.federation.alpha == 0.3);
  CHECK(back.federation.speed_factors == std::vector<double>{1, 1, 1, 1, 4});
  CHECK(back.seeds == std::vector<std::uint64_t>{2, 3, 4});
  CHECK(serialize_config(parse_config_text("")) == serialize_config(ExperimentConfig{}));
}

TEST_CASE("retrain-only runs report only the oracle") {
  ExperimentConfig c = parse_config_text("");
  c.methods = {Method::Retrain};
  const SeedResult r = run_seed(c, 0);
  REQUIRE(r.ok);
  REQUIRE(r.rows.size() == 1);
  CHECK(r.rows[0].method == kOracleName);
  CHECK(r.afu_timelines.empty());
  CHECK_FALSE(r.efficiency.has_value());
}

TEST_CASE("report files are byte-identical across runs") {
  ExperimentConfig c = parse_config_text("");
  c.seeds = {1};
  const auto a = scratch("det_a"), b = scratch("det_b");
  c.output_dir = a;
  run_experiment(c);
  c.output_dir = b;
  run_experiment(c);
  for (const char* f : {"tableI.csv", "tableII.csv", "tableII_by_seed.csv"}) {
    const std::string left = slurp(a / f);
    CHECK_FALSE(left.empty());
    CHECK(left == slurp(b / f));
  }
  std::filesystem::remove_all(a);
  std::filesystem::remove_all(b);
}

TEST_CASE("cli exit codes") {
  const auto dir = scratch("cli");
  CHECK(cli("--help") == 0);
  CHECK(cli("train --set federation.alpha=-1 --out " + dir.string()) == 1);
  CHECK(cli("train --set nowhere.key=1 --out " + dir.string()) == 1);
  CHECK(cli("frobnicate") == 1);
  CHECK(cli("train --seed 0 --set trigger.poison_rate=0.01 --out " + dir.string()) == 2);
  CHECK(cli("train --seed 0 --out " + dir.string()) == 0);
  CHECK(std::filesystem::exists(dir / "seed0" / "train.json"));
  CHECK(cli("unlearn --seed 0 --method afu_ic --mode async --out " + dir.string()) == 0);
  CHECK(cli("unlearn --seed 0 --method retrain --out " + dir.string()) == 0);
  CHECK(cli("evaluate --seed 0 --method afu_ic --out " + dir.string()) == 0);
  CHECK(std::filesystem::exists(dir / "seed0" / "evaluate_afu_ic.csv"));
  std::filesystem::remove_all(dir);
}
