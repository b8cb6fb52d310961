// afu: train / unlearn / evaluate / ablate / report.
//
// Exit codes: 0 ok, 1 configuration error, 2 scenario error (backdoor did not
// implant, partition retries exhausted, numerical blow-up, failed seed),
// 3 anything else.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "afu/config.hpp"
#include "afu/errors.hpp"
#include "afu/experiment.hpp"
#include "afu/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kConfig = 1, kScenario = 2, kInternal = 3 };

struct Options {
  std::string config;
  std::optional<std::string> seed, method, mode, out;
  std::vector<std::string> sets;
  std::string axis;
  std::vector<std::string> values;
};

void add_common(CLI::App* cmd, Options& o) {
  cmd->add_option("--config", o.config, "INI experiment config (defaults when omitted)");
  cmd->add_option("--seed", o.seed, "seed, list or range; overrides [experiment] seeds");
  cmd->add_option("--method", o.method, "retrain | pga | afu_ic (list for report); overrides [experiment] methods");
  cmd->add_option("--mode", o.mode, "sync | async; overrides [federation] mode");
  cmd->add_option("--out", o.out, "output directory; overrides [experiment] output_dir");
  cmd->add_option("--set", o.sets, "section.key=value override, repeatable");
}

afu::ExperimentConfig load(const Options& o) {
  afu::ExperimentConfig cfg = o.config.empty() ? afu::parse_config_text("") : afu::parse_config(o.config);
  if (o.seed) afu::set_config_value(cfg, "experiment.seeds", *o.seed);
  if (o.method) afu::set_config_value(cfg, "experiment.methods", *o.method);
  if (o.mode) afu::set_config_value(cfg, "federation.mode", *o.mode);
  if (o.out) afu::set_config_value(cfg, "experiment.output_dir", *o.out);
  for (const std::string& s : o.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw afu::ConfigError("--set expects section.key=value, got '" + s + "'");
    afu::set_config_value(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

std::uint64_t single_seed(const afu::ExperimentConfig& cfg) {
  if (cfg.seeds.size() != 1) throw afu::ConfigError("this verb needs exactly one seed (use --seed)");
  return cfg.seeds.front();
}

afu::Method single_method(const afu::ExperimentConfig& cfg, const Options& o) {
  if (!o.method || cfg.methods.size() != 1) throw afu::ConfigError("this verb needs exactly one --method");
  return cfg.methods.front();
}

fs::path seed_dir(const afu::ExperimentConfig& cfg, std::uint64_t seed) {
  return cfg.output_dir / ("seed" + std::to_string(seed));
}

fs::path model_path(const fs::path& dir, const std::string& name) { return dir / ("w_" + name + ".fupv"); }

// Rebuilds the trained federation from the checkpoints written by `train`.
afu::TrainingState load_training(const afu::ExperimentConfig& cfg, const afu::Scenario& sc, std::uint64_t seed) {
  const fs::path dir = seed_dir(cfg, seed);
  std::ifstream meta_in(dir / "train.json");
  if (!meta_in) throw afu::ConfigError("no training run in " + dir.string() + " (run `afu train` first)");
  const json meta = json::parse(meta_in);
  if (meta.at("target").get<int>() != sc.target) throw afu::ConfigError("training run used a different target");
  afu::TrainingState state;
  state.w_g = afu::load_params(model_path(dir, "g"));
  state.sim_time = meta.at("sim_time").get<double>();
  state.rounds_run = meta.at("rounds").get<int>();
  state.update_norms = meta.at("update_norms").get<std::vector<double>>();
  state.clients = afu::make_clients(sc.shards, cfg.federation, sc.target);
  for (afu::ClientState& c : state.clients) {
    c.w_local_prev = afu::load_params(dir / ("client" + std::to_string(c.id) + ".fupv"));
    if (c.w_local_prev.size() != state.w_g.size()) throw afu::ConfigError("client checkpoint does not match the model");
  }
  if (state.w_g.size() != sc.spec.param_count()) throw afu::ConfigError("checkpoint does not match the model spec");
  return state;
}

int cmd_train(const Options& o) {
  const afu::ExperimentConfig cfg = load(o);
  const std::uint64_t seed = single_seed(cfg);
  const afu::Scenario sc = afu::build_scenario(cfg, seed);
  const afu::TrainingState state = afu::train_federation(cfg, sc, seed);
  const fs::path dir = seed_dir(cfg, seed);
  fs::create_directories(dir);
  afu::save_params(model_path(dir, "g"), state.w_g);
  for (const afu::ClientState& c : state.clients) {
    afu::save_params(dir / ("client" + std::to_string(c.id) + ".fupv"), c.w_local_prev);
  }
  afu::save_dataset(dir / "clean_test.fusd", sc.clean_test);
  afu::save_dataset(dir / "poisoned_test.fusd", sc.poisoned_test);
  const afu::MetricsRecord m =
      afu::evaluate(sc.spec, state.w_g, sc.eval_sets(), nullptr, state.rounds_run, state.sim_time, afu::Checkpoint::Instant);
  json meta = {{"seed", seed},         {"target", sc.target},  {"rounds", state.rounds_run},
               {"sim_time", state.sim_time}, {"update_norms", state.update_norms}, {"ba", m.ba}, {"ca", m.ca}};
  std::ofstream(dir / "train.json") << meta.dump(2) << '\n';
  std::printf("trained seed %llu: target client %d, BA %.2f, CA %.2f, sim time %.3f s\n",
              static_cast<unsigned long long>(seed), sc.target, m.ba, m.ca, state.sim_time);
  return kOk;
}

int cmd_unlearn(const Options& o) {
  const afu::ExperimentConfig cfg = load(o);
  const std::uint64_t seed = single_seed(cfg);
  const afu::Method method = single_method(cfg, o);
  const afu::Scenario sc = afu::build_scenario(cfg, seed);
  const afu::TrainingState state = load_training(cfg, sc, seed);
  const fs::path dir = seed_dir(cfg, seed);
  if (method == afu::Method::Retrain) {
    const afu::TrainingState oracle =
        afu::retrain_oracle(sc.spec, afu::retained_clients(state, sc.target), cfg.federation, seed);
    afu::save_params(model_path(dir, "retrain"), oracle.w_g);
    std::printf("retrain: %d rounds, sim time %.3f s\n", oracle.rounds_run, oracle.sim_time);
    return kOk;
  }
  const afu::UnlearnJob job = afu::make_job(cfg, sc, method);
  const afu::UnlearnRun run = afu::run_unlearning(cfg.federation.mode, sc.spec, state, cfg.federation, job, seed);
  afu::save_params(model_path(dir, afu::to_string(method)), run.w_g_next);
  afu::write_timeline_jsonl(
      dir / ("timeline_" + std::string(afu::to_string(method)) + "_" + afu::to_string(cfg.federation.mode) + ".jsonl"),
      run.timeline);
  std::printf("%s (%s): latency %.3f s, ascent epochs %d, calibration epochs %d, delta %.4f, blocked %.3f s\n",
              afu::to_string(method), afu::to_string(cfg.federation.mode), run.timeline.latency(),
              run.outcome.ascent_epochs_run, run.outcome.calib_epochs_run, run.outcome.delta,
              run.timeline.total_blocked_time());
  return kOk;
}

int cmd_evaluate(const Options& o) {
  const afu::ExperimentConfig cfg = load(o);
  const std::uint64_t seed = single_seed(cfg);
  const afu::Method method = single_method(cfg, o);
  const afu::Scenario sc = afu::build_scenario(cfg, seed);
  const afu::TrainingState state = load_training(cfg, sc, seed);
  const fs::path dir = seed_dir(cfg, seed);
  if (!fs::exists(model_path(dir, "retrain"))) {
    throw afu::ConfigError("no oracle model in " + dir.string() + " (run `afu unlearn --method retrain` first)");
  }
  afu::RevertingInput in;
  in.spec = &sc.spec;
  in.oracle = afu::load_params(model_path(dir, "retrain"));
  in.retained = afu::retained_clients(state, sc.target);
  in.post_rounds = cfg.federation.post_rounds;
  in.federation = cfg.federation;
  in.sets = sc.eval_sets();
  in.seed = afu::derive_seed(seed, {afu::stream::kPostLearning});
  if (method != afu::Method::Retrain) in.candidates[afu::to_string(method)] = afu::load_params(model_path(dir, afu::to_string(method)));
  const std::vector<afu::RevertingRow> rows = afu::reverting_analysis(in);
  std::cout << afu::format_reverting_table(rows, cfg.federation.post_rounds);
  std::ofstream csv(dir / ("evaluate_" + std::string(afu::to_string(method)) + ".csv"));
  afu::write_table_csv(csv, afu::table_rows(rows));
  return kOk;
}

void print_report(const afu::RunReport& report) {
  std::vector<afu::RevertingRow> medians;
  for (std::size_t i = 0; i + 1 < report.table_ii.size(); i += 2) {
    afu::RevertingRow row;
    row.method = report.table_ii[i].method;
    auto fill = [](afu::MetricsRecord& m, const afu::AggregateRow& a) {
      m.ba = a.ba.median;
      m.ca = a.ca.median;
      m.l2_to_oracle = a.l2.median;
    };
    fill(row.instant, report.table_ii[i]);
    fill(row.recovered, report.table_ii[i + 1]);
    medians.push_back(row);
  }
  std::cout << "median over " << report.seeds.size() << " seeds\n"
            << afu::format_reverting_table(medians, report.config.federation.post_rounds);
  for (const afu::SeedResult& s : report.seeds) {
    if (!s.ok) std::cout << "seed " << s.seed << " failed: " << s.error << '\n';
    else if (s.efficiency) {
      std::printf("seed %llu: async %.3f s, sync %.3f s, speedup %.2f\n", static_cast<unsigned long long>(s.seed),
                  s.efficiency->latency.at(afu::SyncMode::Async), s.efficiency->latency.at(afu::SyncMode::Sync),
                  s.efficiency->speedup);
    }
  }
  std::cout << "wrote " << report.config.output_dir.string() << '\n';
}

int cmd_report(const Options& o) {
  const afu::RunReport report = afu::run_experiment(load(o));
  print_report(report);
  return report.complete ? kOk : kScenario;
}

int cmd_ablate(const Options& o) {
  const afu::ExperimentConfig cfg = load(o);
  const afu::AblationAxis axis = afu::parse_ablation_axis(o.axis);
  const afu::AblationReport report = afu::ablation_matrix(cfg, axis, o.values);
  bool complete = true;
  std::printf("%-12s %-8s %6s %10s %8s %8s %8s\n", afu::to_string(axis), "", "seeds", "latency", "BA", "CA", "L2");
  for (const afu::AblationEntry& e : report.entries) {
    complete = complete && e.run.complete;
    std::printf("%-12s %-8s %6d %10.3f %8.2f %8.2f %8.4f\n", "", e.value.c_str(), e.seeds_ok, e.latency.median, e.afu_ba.median,
                e.afu_ca.median, e.afu_l2.median);
  }
  return complete ? kOk : kScenario;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Asynchronous federated unlearning simulator"};
  app.require_subcommand(1);
  Options o;
  CLI::App* train = app.add_subcommand("train", "train the backdoored federation and checkpoint it");
  CLI::App* unlearn = app.add_subcommand("unlearn", "run one unlearning method on a trained federation");
  CLI::App* evaluate = app.add_subcommand("evaluate", "instant and post-recovery metrics for one method");
  CLI::App* ablate = app.add_subcommand("ablate", "one full experiment per value along an axis");
  CLI::App* report = app.add_subcommand("report", "full multi-seed experiment with CSV/JSON output");
  for (CLI::App* cmd : {train, unlearn, evaluate, ablate, report}) add_common(cmd, o);
  ablate->add_option("--axis", o.axis, "gamma_calib | mode | alpha | n_clients")->required();
  ablate->add_option("--values", o.values, "values along the axis")->required()->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfig;
  }

  try {
    if (*train) return cmd_train(o);
    if (*unlearn) return cmd_unlearn(o);
    if (*evaluate) return cmd_evaluate(o);
    if (*ablate) return cmd_ablate(o);
    return cmd_report(o);
  } catch (const afu::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const afu::ScenarioError& e) {
    std::cerr << "scenario error: " << e.what() << '\n';
    return kScenario;
  } catch (const afu::PartitionError& e) {
    std::cerr << "scenario error: " << e.what() << '\n';
    return kScenario;
  } catch (const afu::NumericalError& e) {
    std::cerr << "scenario error: " << e.what() << '\n';
    return kScenario;
  } catch (const afu::EvaluationError& e) {
    std::cerr << "scenario error: " << e.what() << '\n';
    return kScenario;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return kInternal;
  }
}
