#include "afu/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "afu/errors.hpp"

namespace afu {

namespace {

double percent_correct(const ModelSpec& spec, const ParamVector& w, const DatasetShard& data, const char* what) {
  if (data.empty()) throw EvaluationError(std::string(what) + ": empty test set");
  return 100.0 * accuracy(spec, w, data);
}

std::string fixed(double v, int digits) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

double backdoor_accuracy(const ModelSpec& spec, const ParamVector& w, const DatasetShard& poisoned_test) {
  return percent_correct(spec, w, poisoned_test, "backdoor_accuracy");
}

double clean_accuracy(const ModelSpec& spec, const ParamVector& w, const DatasetShard& clean_test) {
  return percent_correct(spec, w, clean_test, "clean_accuracy");
}

MetricsRecord evaluate(const ModelSpec& spec, const ParamVector& w, const EvalSets& sets, const ParamVector* oracle,
                       int round, double sim_time, Checkpoint tag) {
  if (sets.clean_test == nullptr || sets.poisoned_test == nullptr) throw EvaluationError("evaluate: missing test sets");
  MetricsRecord r;
  r.round = round;
  r.sim_time = sim_time;
  r.ba = backdoor_accuracy(spec, w, *sets.poisoned_test);
  r.ca = clean_accuracy(spec, w, *sets.clean_test);
  r.l2_to_oracle = oracle != nullptr ? l2_distance(w, *oracle) : std::numeric_limits<double>::quiet_NaN();
  r.tag = tag;
  return r;
}

std::vector<RevertingRow> reverting_analysis(const RevertingInput& in) {
  if (in.spec == nullptr) throw ConfigError("reverting_analysis: no model spec");
  if (in.post_rounds < 0) throw ConfigError("reverting_analysis: post_rounds must be >= 0");
  const ModelSpec& spec = *in.spec;

  std::vector<ParamVector> oracle_path;
  run_post_learning(spec, in.oracle, in.retained, in.post_rounds, in.federation, in.seed, in.start_time, {},
                    &oracle_path);

  auto analyse = [&](const std::string& name, const ParamVector& start) {
    RevertingRow row;
    row.method = name;
    EvalHook hook = [&](int round, const ParamVector& w, double t) {
      return evaluate(spec, w, in.sets, &oracle_path[static_cast<std::size_t>(round)], round, t,
                      Checkpoint::Trajectory);
    };
    row.trajectory = run_post_learning(spec, start, in.retained, in.post_rounds, in.federation, in.seed,
                                       in.start_time, hook);
    row.instant = row.trajectory.front();
    row.instant.tag = Checkpoint::Instant;
    row.recovered = row.trajectory.back();
    row.recovered.tag = Checkpoint::PostRecovery;
    return row;
  };

  std::vector<RevertingRow> rows;
  rows.push_back(analyse(kOracleName, in.oracle));
  for (const auto& [name, w] : in.candidates) rows.push_back(analyse(name, w));
  return rows;
}

EfficiencyReport efficiency_report(const std::map<SyncMode, Timeline>& timelines) {
  EfficiencyReport report;
  if (timelines.empty()) throw EvaluationError("efficiency_report: no timelines");
  const std::uint64_t seed = timelines.begin()->second.seed;
  for (const auto& [mode, tl] : timelines) {
    if (tl.seed != seed) throw EvaluationError("efficiency_report: timelines come from different seeds");
    if (tl.mode != mode) throw EvaluationError("efficiency_report: timeline filed under the wrong mode");
    report.latency[mode] = tl.latency();
    report.blocked_time[mode] = tl.blocked_time_per_client;
  }
  if (report.latency.count(SyncMode::Sync) && report.latency.count(SyncMode::Async)) {
    const double async_latency = report.latency[SyncMode::Async];
    if (!(async_latency > 0.0)) throw EvaluationError("efficiency_report: async latency must be positive");
    report.speedup = report.latency[SyncMode::Sync] / async_latency;
  }
  return report;
}

std::vector<TableRow> table_rows(const std::vector<RevertingRow>& rows) {
  std::vector<TableRow> out;
  for (const RevertingRow& r : rows) {
    out.push_back({r.method, r.instant});
    out.push_back({r.method, r.recovered});
  }
  return out;
}

void write_table_csv(std::ostream& os, const std::vector<TableRow>& rows) {
  os << kTableHeader << '\n';
  for (const TableRow& r : rows) {
    os << r.method << ',' << to_string(r.record.tag) << ',' << fixed(r.record.ba, 2) << ',' << fixed(r.record.ca, 2)
       << ',' << fixed(r.record.l2_to_oracle, 4) << ',' << fixed(r.record.sim_time, 3) << '\n';
  }
}

std::string format_reverting_table(const std::vector<RevertingRow>& rows, int post_rounds) {
  std::ostringstream os;
  char line[256];
  std::snprintf(line, sizeof line, "%-10s | %-26s | %-26s\n", "Method", "Post-Unlearn (Instant)",
                ("Post-Recovery (" + std::to_string(post_rounds) + " Rnds)").c_str());
  os << line;
  std::snprintf(line, sizeof line, "%-10s | %8s %8s %8s | %8s %8s %8s\n", "", "BA", "CA", "L2", "BA", "CA", "L2");
  os << line << std::string(68, '-') << '\n';
  for (const RevertingRow& r : rows) {
    std::snprintf(line, sizeof line, "%-10s | %8.2f %8.2f %8.4f | %8.2f %8.2f %8.4f\n", r.method.c_str(), r.instant.ba,
                  r.instant.ca, r.instant.l2_to_oracle, r.recovered.ba, r.recovered.ca, r.recovered.l2_to_oracle);
    os << line;
  }
  return os.str();
}

}  // namespace afu
