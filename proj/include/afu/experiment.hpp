#pragma once

// Scenario construction and the multi-seed experiment driver behind the CLI.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "afu/config.hpp"
#include "afu/metrics.hpp"
#include "afu/scheduler.hpp"

namespace afu {

inline constexpr int kReportSchemaVersion = 1;

// Everything derived from (config, seed) before training starts.
struct Scenario {
  ModelSpec spec;
  std::vector<DatasetShard> shards;  // target shard already poisoned
  DatasetShard clean_test;
  DatasetShard poisoned_test;
  DatasetShard calib_data;  // server-held, drawn from its own seed stream
  int target = 0;

  EvalSets eval_sets() const { return {&clean_test, &poisoned_test}; }
};

Scenario build_scenario(const ExperimentConfig& cfg, std::uint64_t seed);

// Gated on the backdoor implanting (ScenarioError otherwise).
TrainingState train_federation(const ExperimentConfig& cfg, const Scenario& sc, std::uint64_t seed);

// afu_ic job for the scenario; pga uses the same job with gamma_calib = 0.
UnlearnJob make_job(const ExperimentConfig& cfg, const Scenario& sc, Method method);

std::vector<ClientState> retained_clients(const TrainingState& state, int target);

struct MethodRun {
  Method method = Method::AfuIc;
  double cost_s = 0.0;  // unlearning latency, or the oracle's training time
  int ascent_epochs = 0;
  int calib_epochs = 0;
  double delta = 0.0;
  std::vector<double> calib_epoch_kl;
};

struct SeedResult {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  int target = 0;
  std::vector<std::size_t> shard_sizes;
  MetricsRecord trained;  // w_g before unlearning
  std::vector<RevertingRow> rows;  // only requested methods
  std::map<Method, MethodRun> runs;
  std::map<SyncMode, Timeline> afu_timelines;  // both modes when afu_ic runs
  std::optional<EfficiencyReport> efficiency;
};

SeedResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed);

struct Stat {
  double median = 0.0, min = 0.0, max = 0.0;
};

Stat summarize(std::vector<double> values);

struct AggregateRow {
  std::string method;
  Checkpoint checkpoint = Checkpoint::Instant;
  Stat ba, ca, l2, sim_time;
};

struct RunReport {
  ExperimentConfig config;
  std::vector<SeedResult> seeds;  // ordered by seed value
  std::vector<AggregateRow> table_ii;  // medians over successful seeds
  std::vector<AggregateRow> table_i;   // post-recovery metrics, sim_time = method cost
  bool complete = true;
};

// Seeds run in parallel, at most AFU_THREADS at a time (default: hardware
// concurrency). Writes the report files when write_files is set.
RunReport run_experiment(const ExperimentConfig& cfg, bool write_files = true);

unsigned thread_cap();

std::vector<AggregateRow> aggregate(const std::vector<SeedResult>& seeds, bool cost_as_time);

void write_report(const RunReport& report);

enum class AblationAxis { GammaCalib, Mode, Alpha, NClients };

const char* to_string(AblationAxis axis);
AblationAxis parse_ablation_axis(const std::string& text);

struct AblationEntry {
  std::string value;
  RunReport run;
  Stat afu_ba, afu_ca, afu_l2, latency;  // afu_ic, post-recovery, implanted seeds only
  int seeds_ok = 0;
};

struct AblationReport {
  AblationAxis axis = AblationAxis::GammaCalib;
  std::vector<AblationEntry> entries;
};

// Every value is checked before any sub-run starts.
std::vector<ExperimentConfig> ablation_configs(const ExperimentConfig& base, AblationAxis axis,
                                               const std::vector<std::string>& values);
AblationReport ablation_matrix(const ExperimentConfig& base, AblationAxis axis, const std::vector<std::string>& values,
                               bool write_files = true);

}  // namespace afu
