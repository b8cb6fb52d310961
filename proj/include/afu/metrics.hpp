#pragma once

// Backdoor accuracy, clean accuracy, L2 distance to the retrained oracle,
// the instant-vs-recovered reverting table, and the sync/async efficiency
// comparison.

#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "afu/federation.hpp"
#include "afu/metrics_record.hpp"
#include "afu/scheduler.hpp"
#include "afu/tensor_nn.hpp"

namespace afu {

// Percentage of poisoned_test predicted as its (target) label.
double backdoor_accuracy(const ModelSpec& spec, const ParamVector& w, const DatasetShard& poisoned_test);
// Top-1 percentage on the clean test split.
double clean_accuracy(const ModelSpec& spec, const ParamVector& w, const DatasetShard& clean_test);

struct EvalSets {
  const DatasetShard* clean_test = nullptr;
  const DatasetShard* poisoned_test = nullptr;
};

// l2_to_oracle is NaN when oracle is null.
MetricsRecord evaluate(const ModelSpec& spec, const ParamVector& w, const EvalSets& sets, const ParamVector* oracle,
                       int round, double sim_time, Checkpoint tag);

struct RevertingRow {
  std::string method;
  MetricsRecord instant;
  MetricsRecord recovered;
  std::vector<MetricsRecord> trajectory;  // rounds 0..post_rounds
};

struct RevertingInput {
  const ModelSpec* spec = nullptr;
  std::map<std::string, ParamVector> candidates;
  ParamVector oracle;
  std::vector<ClientState> retained;
  int post_rounds = 10;
  FederationConfig federation;
  EvalSets sets;
  std::uint64_t seed = 0;  // post-learning seed shared by every candidate
  double start_time = 0.0;
};

// Each candidate and the oracle run the same post_rounds of retained-only
// training from the same seed; distances compare models at equal round index.
// The oracle row comes first, then candidates in name order.
std::vector<RevertingRow> reverting_analysis(const RevertingInput& in);

inline constexpr const char* kOracleName = "retrain";

struct EfficiencyReport {
  std::map<SyncMode, double> latency;
  double speedup = 0.0;  // sync latency / async latency
  std::map<SyncMode, std::map<int, double>> blocked_time;
};

EfficiencyReport efficiency_report(const std::map<SyncMode, Timeline>& timelines);

// One CSV row per (method, checkpoint).
struct TableRow {
  std::string method;
  MetricsRecord record;
};

inline constexpr const char* kTableHeader = "method,checkpoint,ba,ca,l2,sim_time";

void write_table_csv(std::ostream& os, const std::vector<TableRow>& rows);
std::vector<TableRow> table_rows(const std::vector<RevertingRow>& rows);

// Text layout: one line per method, instant then post-recovery columns.
std::string format_reverting_table(const std::vector<RevertingRow>& rows, int post_rounds);

}  // namespace afu
