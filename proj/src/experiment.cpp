#include "afu/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "afu/errors.hpp"
#include "afu/rng.hpp"

namespace afu {

namespace {

using nlohmann::json;

int largest_shard(const std::vector<DatasetShard>& shards) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < shards.size(); ++k) {
    if (shards[k].size() > shards[best].size()) best = k;
  }
  return static_cast<int>(best);
}

json record_json(const MetricsRecord& r) {
  auto num = [](double v) { return std::isnan(v) ? json(nullptr) : json(v); };
  return {{"round", r.round},  {"checkpoint", to_string(r.tag)}, {"ba", r.ba}, {"ca", r.ca},
          {"l2", num(r.l2_to_oracle)}, {"sim_time", r.sim_time}};
}

json stat_json(const Stat& s) { return {{"median", s.median}, {"min", s.min}, {"max", s.max}}; }

json aggregate_json(const std::vector<AggregateRow>& rows) {
  json out = json::array();
  for (const AggregateRow& r : rows) {
    out.push_back({{"method", r.method},
                   {"checkpoint", to_string(r.checkpoint)},
                   {"ba", stat_json(r.ba)},
                   {"ca", stat_json(r.ca)},
                   {"l2", stat_json(r.l2)},
                   {"sim_time", stat_json(r.sim_time)}});
  }
  return out;
}

// The resolved config as {section: {key: value}} with values kept as text.
json config_json(const ExperimentConfig& cfg) {
  json out = json::object();
  std::istringstream in(serialize_config(cfg));
  std::string line, section;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.front() == '[') {
      section = line.substr(1, line.size() - 2);
      continue;
    }
    const auto eq = line.find(" = ");
    out[section][line.substr(0, eq)] = line.substr(eq + 3);
  }
  return out;
}

json seed_json(const SeedResult& r) {
  json out = {{"seed", r.seed}, {"ok", r.ok}};
  if (!r.ok) {
    out["error"] = r.error;
    return out;
  }
  out["target"] = r.target;
  out["shard_sizes"] = r.shard_sizes;
  out["trained"] = record_json(r.trained);
  json methods = json::object();
  for (const RevertingRow& row : r.rows) {
    json traj = json::array();
    for (const MetricsRecord& m : row.trajectory) traj.push_back(record_json(m));
    methods[row.method] = {{"instant", record_json(row.instant)},
                           {"post_recovery", record_json(row.recovered)},
                           {"trajectory", traj}};
  }
  for (const auto& [method, run] : r.runs) {
    json& m = methods[to_string(method)];
    m["cost_s"] = run.cost_s;
    if (method == Method::Retrain) continue;
    m["ascent_epochs"] = run.ascent_epochs;
    m["calib_epochs"] = run.calib_epochs;
    m["delta"] = run.delta;
    m["calib_epoch_kl"] = run.calib_epoch_kl;
  }
  out["methods"] = methods;
  if (r.efficiency) {
    json eff = {{"speedup", r.efficiency->speedup}};
    for (const auto& [mode, latency] : r.efficiency->latency) {
      json blocked = json::object();
      for (const auto& [client, t] : r.efficiency->blocked_time.at(mode)) blocked[std::to_string(client)] = t;
      eff[to_string(mode)] = {{"latency", latency}, {"blocked_time", blocked}};
    }
    out["efficiency"] = eff;
  }
  return out;
}

void write_aggregate_csv(const std::filesystem::path& path, const std::vector<AggregateRow>& rows) {
  std::vector<TableRow> table;
  for (const AggregateRow& r : rows) {
    MetricsRecord m;
    m.ba = r.ba.median;
    m.ca = r.ca.median;
    m.l2_to_oracle = r.l2.median;
    m.sim_time = r.sim_time.median;
    m.tag = r.checkpoint;
    table.push_back({r.method, m});
  }
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path.string());
  write_table_csv(os, table);
}

void write_by_seed_csv(const std::filesystem::path& path, const std::vector<SeedResult>& seeds) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << "seed," << kTableHeader << '\n';
  for (const SeedResult& s : seeds) {
    if (!s.ok) continue;
    std::ostringstream body;
    write_table_csv(body, table_rows(s.rows));
    std::istringstream lines(body.str());
    std::string line;
    std::getline(lines, line);  // header
    while (std::getline(lines, line)) os << s.seed << ',' << line << '\n';
  }
}

}  // namespace

Scenario build_scenario(const ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const int classes = cfg.data.num_classes;
  Scenario sc{cfg.model.build(classes), {}, {}, {}, {}, 0};
  const DatasetShard data =
      generate_synthetic(classes, cfg.data.per_class, derive_seed(seed, {stream::kData}), {}, cfg.data.pixel_noise);
  TrainTestSplit split = split_train_test(data, cfg.data.test_fraction, derive_seed(seed, {stream::kSplit}));
  sc.shards = dirichlet_partition(split.train, cfg.federation.n_clients, cfg.federation.alpha,
                                  derive_seed(seed, {stream::kPartition}));
  sc.target = cfg.target == kLargestShard ? largest_shard(sc.shards) : cfg.target;
  PoisonedData poisoned = inject_backdoor(sc.shards[static_cast<std::size_t>(sc.target)], split.test, cfg.trigger,
                                          derive_seed(seed, {stream::kPoison}));
  sc.shards[static_cast<std::size_t>(sc.target)] = std::move(poisoned.poisoned_shard);
  sc.poisoned_test = std::move(poisoned.poisoned_testset);
  sc.clean_test = std::move(split.test);

  const int per_class = (cfg.unlearn.calib_samples + classes - 1) / classes;
  sc.calib_data = generate_synthetic(classes, per_class, derive_seed(seed, {stream::kCalibrationData}), {},
                                     cfg.data.pixel_noise);
  sc.calib_data.owner = kServer;
  return sc;
}

TrainingState train_federation(const ExperimentConfig& cfg, const Scenario& sc, std::uint64_t seed) {
  return run_training(sc.spec, make_clients(sc.shards, cfg.federation, sc.target), cfg.federation, seed,
                      &sc.poisoned_test, cfg.min_backdoor_accuracy);
}

UnlearnJob make_job(const ExperimentConfig& cfg, const Scenario& sc, Method method) {
  if (method == Method::Retrain) throw ConfigError("make_job: retrain is not an unlearning job");
  UnlearnJob job;
  job.target = sc.target;
  job.unlearn = cfg.unlearn;
  if (method == Method::Pga) job.unlearn.gamma_calib = 0.0;
  job.augment = cfg.augment;
  job.calib_data = &sc.calib_data;
  job.patch_source = cfg.augment.patch_probability > 0.0 ? &cfg.trigger : nullptr;
  return job;
}

std::vector<ClientState> retained_clients(const TrainingState& state, int target) {
  std::vector<ClientState> out;
  for (const ClientState& c : state.clients) {
    if (c.id != target) out.push_back(c);
  }
  return out;
}

SeedResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  SeedResult result;
  result.seed = seed;
  try {
    const Scenario sc = build_scenario(cfg, seed);
    result.target = sc.target;
    for (const DatasetShard& s : sc.shards) result.shard_sizes.push_back(s.size());
    const TrainingState state = train_federation(cfg, sc, seed);
    result.trained = evaluate(sc.spec, state.w_g, sc.eval_sets(), nullptr, 0, state.sim_time, Checkpoint::Instant);

    const std::vector<ClientState> retained = retained_clients(state, sc.target);
    const TrainingState oracle = retrain_oracle(sc.spec, retained, cfg.federation, seed);
    result.runs[Method::Retrain] = {Method::Retrain, oracle.sim_time, 0, 0, 0.0, {}};

    RevertingInput in;
    in.spec = &sc.spec;
    in.oracle = oracle.w_g;
    in.retained = retained;
    in.post_rounds = cfg.federation.post_rounds;
    in.federation = cfg.federation;
    in.sets = sc.eval_sets();
    in.seed = derive_seed(seed, {stream::kPostLearning});

    for (Method m : {Method::Pga, Method::AfuIc}) {
      if (!cfg.has_method(m)) continue;
      const UnlearnJob job = make_job(cfg, sc, m);
      UnlearnRun run;
      if (m == Method::AfuIc) {
        for (SyncMode mode : {SyncMode::Async, SyncMode::Sync}) {
          UnlearnRun r = run_unlearning(mode, sc.spec, state, cfg.federation, job, seed);
          result.afu_timelines[mode] = r.timeline;
          if (mode == cfg.federation.mode) run = std::move(r);
        }
        result.efficiency = efficiency_report(result.afu_timelines);
      } else {
        run = run_unlearning(cfg.federation.mode, sc.spec, state, cfg.federation, job, seed);
      }
      result.runs[m] = {m,
                        run.timeline.latency(),
                        run.outcome.ascent_epochs_run,
                        run.outcome.calib_epochs_run,
                        run.outcome.delta,
                        run.outcome.calib_epoch_kl};
      in.candidates[to_string(m)] = run.w_g_next;
    }

    std::vector<RevertingRow> rows = reverting_analysis(in);
    for (RevertingRow& row : rows) {
      if (row.method == kOracleName && !cfg.has_method(Method::Retrain)) continue;
      result.rows.push_back(std::move(row));
    }
    if (!cfg.has_method(Method::Retrain)) result.runs.erase(Method::Retrain);
    result.ok = true;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    result.ok = false;
    result.error = e.what();
    result.rows.clear();
  }
  return result;
}

Stat summarize(std::vector<double> values) {
  Stat s;
  if (values.empty()) {
    s.median = s.min = s.max = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  s.median = n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
  s.min = values.front();
  s.max = values.back();
  return s;
}

std::vector<AggregateRow> aggregate(const std::vector<SeedResult>& seeds, bool cost_as_time) {
  std::vector<std::string> order;
  for (const SeedResult& s : seeds) {
    for (const RevertingRow& r : s.rows) {
      if (std::find(order.begin(), order.end(), r.method) == order.end()) order.push_back(r.method);
    }
  }
  std::vector<AggregateRow> out;
  const std::vector<Checkpoint> checkpoints =
      cost_as_time ? std::vector<Checkpoint>{Checkpoint::PostRecovery}
                   : std::vector<Checkpoint>{Checkpoint::Instant, Checkpoint::PostRecovery};
  for (const std::string& method : order) {
    for (Checkpoint cp : checkpoints) {
      std::vector<double> ba, ca, l2, t;
      for (const SeedResult& s : seeds) {
        for (const RevertingRow& r : s.rows) {
          if (r.method != method) continue;
          const MetricsRecord& m = cp == Checkpoint::Instant ? r.instant : r.recovered;
          ba.push_back(m.ba);
          ca.push_back(m.ca);
          l2.push_back(m.l2_to_oracle);
          t.push_back(cost_as_time ? s.runs.at(parse_method(method)).cost_s : m.sim_time);
        }
      }
      out.push_back({method, cp, summarize(ba), summarize(ca), summarize(l2), summarize(t)});
    }
  }
  return out;
}

unsigned thread_cap() {
  unsigned cap = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("AFU_THREADS")) {
    const int v = std::atoi(env);
    if (v >= 1) cap = static_cast<unsigned>(v);
  }
  return cap;
}

RunReport run_experiment(const ExperimentConfig& cfg, bool write_files) {
  cfg.validate();
  RunReport report;
  report.config = cfg;
  std::vector<std::uint64_t> seeds = cfg.seeds;
  std::sort(seeds.begin(), seeds.end());
  report.seeds.resize(seeds.size());

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < seeds.size(); i = next++) {
      try {
        report.seeds[i] = run_seed(cfg, seeds[i]);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const unsigned n_threads = std::min<unsigned>(thread_cap(), static_cast<unsigned>(seeds.size()));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (std::thread& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  for (const SeedResult& s : report.seeds) report.complete = report.complete && s.ok;
  report.table_ii = aggregate(report.seeds, false);
  report.table_i = aggregate(report.seeds, true);
  if (write_files) write_report(report);
  return report;
}

void write_report(const RunReport& report) {
  namespace fs = std::filesystem;
  const fs::path dir = report.config.output_dir;
  fs::create_directories(dir / "timelines");

  json j = {{"schema_version", kReportSchemaVersion},
            {"complete", report.complete},
            {"config", config_json(report.config)},
            {"table_i", aggregate_json(report.table_i)},
            {"table_ii", aggregate_json(report.table_ii)}};
  json seeds = json::array();
  for (const SeedResult& s : report.seeds) seeds.push_back(seed_json(s));
  j["seeds"] = seeds;
  std::ofstream(dir / "report.json") << j.dump(2) << '\n';

  write_aggregate_csv(dir / "tableI.csv", report.table_i);
  write_aggregate_csv(dir / "tableII.csv", report.table_ii);
  write_by_seed_csv(dir / "tableII_by_seed.csv", report.seeds);
  for (const SeedResult& s : report.seeds) {
    for (const auto& [mode, tl] : s.afu_timelines) {
      write_timeline_jsonl(dir / "timelines" / ("seed" + std::to_string(s.seed) + "_afu_ic_" + to_string(mode) + ".jsonl"),
                           tl);
    }
  }
}

const char* to_string(AblationAxis axis) {
  switch (axis) {
    case AblationAxis::GammaCalib:
      return "gamma_calib";
    case AblationAxis::Mode:
      return "mode";
    case AblationAxis::Alpha:
      return "alpha";
    case AblationAxis::NClients:
      return "n_clients";
  }
  return "?";
}

AblationAxis parse_ablation_axis(const std::string& text) {
  for (AblationAxis a : {AblationAxis::GammaCalib, AblationAxis::Mode, AblationAxis::Alpha, AblationAxis::NClients}) {
    if (text == to_string(a)) return a;
  }
  throw ConfigError("ablation axis must be gamma_calib, mode, alpha or n_clients; got '" + text + "'");
}

std::vector<ExperimentConfig> ablation_configs(const ExperimentConfig& base, AblationAxis axis,
                                               const std::vector<std::string>& values) {
  if (values.empty()) throw ConfigError("ablation needs at least one value");
  static const std::map<AblationAxis, std::string> keys = {{AblationAxis::GammaCalib, "unlearn.gamma_calib"},
                                                           {AblationAxis::Mode, "federation.mode"},
                                                           {AblationAxis::Alpha, "federation.alpha"},
                                                           {AblationAxis::NClients, "federation.n_clients"}};
  std::vector<ExperimentConfig> out;
  for (const std::string& v : values) {
    ExperimentConfig cfg = base;
    set_config_value(cfg, keys.at(axis), v);
    if (axis == AblationAxis::NClients && cfg.federation.speed_factors.size() !=
                                              static_cast<std::size_t>(cfg.federation.n_clients)) {
      cfg.federation.speed_factors.clear();
    }
    if (!cfg.has_method(Method::AfuIc)) cfg.methods.push_back(Method::AfuIc);
    cfg.output_dir = base.output_dir / (std::string(to_string(axis)) + "_" + v);
    try {
      cfg.validate();
    } catch (const ConfigError& e) {
      throw ConfigError("ablation value '" + v + "' for " + to_string(axis) + ": " + e.what());
    }
    out.push_back(std::move(cfg));
  }
  return out;
}

AblationReport ablation_matrix(const ExperimentConfig& base, AblationAxis axis, const std::vector<std::string>& values,
                               bool write_files) {
  const std::vector<ExperimentConfig> configs = ablation_configs(base, axis, values);
  AblationReport report;
  report.axis = axis;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    AblationEntry e;
    e.value = values[i];
    e.run = run_experiment(configs[i], write_files);
    std::vector<double> ba, ca, l2, latency;
    for (const SeedResult& s : e.run.seeds) {
      if (!s.ok) continue;
      ++e.seeds_ok;
      for (const RevertingRow& r : s.rows) {
        if (r.method != to_string(Method::AfuIc)) continue;
        ba.push_back(r.recovered.ba);
        ca.push_back(r.recovered.ca);
        l2.push_back(r.recovered.l2_to_oracle);
        latency.push_back(s.runs.at(Method::AfuIc).cost_s);
      }
    }
    e.afu_ba = summarize(ba);
    e.afu_ca = summarize(ca);
    e.afu_l2 = summarize(l2);
    e.latency = summarize(latency);
    report.entries.push_back(std::move(e));
  }
  if (write_files) {
    std::filesystem::create_directories(base.output_dir);
    std::ofstream os(base.output_dir / "tableIV.csv");
    if (!os) throw ConfigError("cannot write tableIV.csv");
    os << "axis,value,seeds_ok,latency,ba,ca,l2,ba_min,ba_max\n";
    char line[256];
    for (const AblationEntry& e : report.entries) {
      std::snprintf(line, sizeof line, "%s,%s,%d,%.3f,%.2f,%.2f,%.4f,%.2f,%.2f\n", to_string(axis), e.value.c_str(), e.seeds_ok,
                    e.latency.median, e.afu_ba.median, e.afu_ca.median, e.afu_l2.median, e.afu_ba.min, e.afu_ba.max);
      os << line;
    }
  }
  return report;
}

}  // namespace afu
