#include <doctest.h>

#include <sstream>

#include <json.hpp>

#include "afu/errors.hpp"
#include "afu/metrics.hpp"
#include "afu/rng.hpp"
#include "afu/scheduler.hpp"
#include "fixture.hpp"

using namespace afu;

namespace {

std::vector<ClientState> identical_clients(int n, const DatasetShard& shard, const FederationConfig& cfg) {
  std::vector<DatasetShard> shards(static_cast<std::size_t>(n), shard);
  for (int k = 0; k < n; ++k) shards[static_cast<std::size_t>(k)].owner = k;
  return make_clients(shards, cfg, 0);
}

}  // namespace

TEST_CASE("weighted average") {
  const ParamVector avg = weighted_average({Eigen::Vector2d(0, 0), Eigen::Vector2d(3, 3)}, {1.0, 2.0});
  CHECK(avg[0] == 2.0);
  CHECK(avg[1] == 2.0);
  CHECK_THROWS_AS(weighted_average({}, {}), ConfigError);
  CHECK_THROWS_AS(weighted_average({Eigen::Vector2d(0, 0)}, {0.0}), ConfigError);
}

TEST_CASE("identical full-batch clients agree with a single client") {
  const ModelSpec spec = ModelSpec::dense(3, {}, {16});
  const DatasetShard shard = generate_synthetic(3, 20, 6);
  FederationConfig cfg;
  cfg.batch_size = 128;
  std::vector<ClientState> clients = identical_clients(3, shard, cfg);
  const ParamVector w0 = initialize_params(spec, 6);
  const RoundResult r = run_sync_round(spec, w0, clients, cfg, 9);
  const ParamVector single = local_train(spec, w0, shard, cfg.local_epochs, cfg.batch_size, cfg.lr, 1);
  CHECK((r.w_next - single).cwiseAbs().maxCoeff() < 1e-12);
  for (const ClientState& c : clients) CHECK((c.w_local_prev - single).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("a 4x straggler quadruples the round time") {
  const ModelSpec spec = ModelSpec::dense(3, {}, {8});
  const DatasetShard shard = generate_synthetic(3, 10, 7);
  FederationConfig cfg;
  std::vector<ClientState> flat = identical_clients(5, shard, cfg);
  const double base = run_sync_round(spec, initialize_params(spec, 1), flat, cfg, 1).round_time;
  cfg.speed_factors = {1, 1, 1, 1, 4};
  std::vector<ClientState> slow = identical_clients(5, shard, cfg);
  CHECK(run_sync_round(spec, initialize_params(spec, 1), slow, cfg, 1).round_time == doctest::Approx(4.0 * base));
}

TEST_CASE("zero rounds return the initialization") {
  const ModelSpec spec = ModelSpec::dense(3, {}, {8});
  FederationConfig cfg;
  cfg.rounds = 0;
  const auto shards = dirichlet_partition(generate_synthetic(3, 20, 1), 5, 1.0, 1);
  // rounds >= 1 is a config invariant; run_training itself accepts 0.
  const TrainingState s = run_training(spec, make_clients(shards, cfg, 0), cfg, 4);
  CHECK(s.w_g == initialize_params(spec, derive_seed(4, {stream::kInit})));
  CHECK(s.rounds_run == 0);
  CHECK(s.sim_time == 0.0);
}

TEST_CASE("default training implants the backdoor") {
  const auto& t = test::default_seed0();
  CHECK(backdoor_accuracy(t.sc.spec, t.state.w_g, t.sc.poisoned_test) >= 80.0);
  CHECK(clean_accuracy(t.sc.spec, t.state.w_g, t.sc.clean_test) >= 80.0);
  CHECK(t.state.rounds_run == t.cfg.federation.rounds);
  for (const ClientState& c : t.state.clients) CHECK(c.w_local_prev.size() == t.state.w_g.size());
}

TEST_CASE("implant gate") {
  ExperimentConfig cfg = parse_config_text("");
  cfg.trigger.poison_rate = 0.01;
  const Scenario sc = build_scenario(cfg, 0);
  CHECK_THROWS_AS(train_federation(cfg, sc, 0), ScenarioError);
}

TEST_CASE("post learning with zero rounds") {
  const auto& t = test::default_seed0();
  int calls = 0;
  const auto traj = run_post_learning(t.sc.spec, t.state.w_g, retained_clients(t.state, t.sc.target), 0,
                                      t.cfg.federation, 1, 0.0, [&](int round, const ParamVector&, double time) {
                                        ++calls;
                                        MetricsRecord m;
                                        m.round = round;
                                        m.sim_time = time;
                                        return m;
                                      });
  CHECK(traj.size() == 1);
  CHECK(calls == 1);
}

TEST_CASE("async and sync scheduling") {
  const auto& t = test::default_seed0();
  const UnlearnJob job = make_job(t.cfg, t.sc, Method::AfuIc);
  const UnlearnRun a = run_async_unlearning(t.sc.spec, t.state, t.cfg.federation, job, 0);
  const UnlearnRun s = run_sync_unlearning(t.sc.spec, t.state, t.cfg.federation, job, 0);

  CHECK(a.w_g_next == s.w_g_next);
  CHECK(a.w_g_next == a.outcome.w_calibrated);

  CHECK(a.timeline.total_blocked_time() == 0.0);
  CHECK(a.timeline.blocked_time_per_client.size() == t.state.clients.size() - 1);
  for (const auto& [client, blocked] : a.timeline.blocked_time_per_client) CHECK(blocked == 0.0);

  const double ascent = a.outcome.local_compute_cost;
  for (const auto& [client, blocked] : s.timeline.blocked_time_per_client) {
    CHECK(client != t.sc.target);
    CHECK(blocked >= ascent);
  }
  CHECK(s.timeline.latency() >= a.timeline.latency());

  for (const Timeline* tl : {&a.timeline, &s.timeline}) {
    REQUIRE_FALSE(tl->events.empty());
    CHECK(tl->events.front().kind == EventKind::UnlearnRequested);
    CHECK(tl->events.back().kind == EventKind::CalibrationDone);
    CHECK(tl->events.back().time == doctest::Approx(tl->adoption_time));
    for (std::size_t i = 1; i < tl->events.size(); ++i) CHECK_FALSE(event_before(tl->events[i], tl->events[i - 1]));
  }
  CHECK(a.retained.size() == t.state.clients.size() - 1);

  std::ostringstream os;
  write_timeline_jsonl(os, a.timeline);
  std::istringstream in(os.str());
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("t"));
    CHECK(j.contains("kind"));
    CHECK(j.contains("client"));
    CHECK(j.contains("note"));
    ++lines;
  }
  CHECK(lines == a.timeline.events.size());
}

TEST_CASE("async latency ignores retained speeds") {
  const auto& t = test::default_seed0();
  const UnlearnJob job = make_job(t.cfg, t.sc, Method::AfuIc);
  const double base = run_async_unlearning(t.sc.spec, t.state, t.cfg.federation, job, 0).timeline.latency();
  FederationConfig slow = t.cfg.federation;
  slow.speed_factors.assign(static_cast<std::size_t>(slow.n_clients), 3.0);
  slow.speed_factors[static_cast<std::size_t>(t.sc.target)] = 1.0;
  TrainingState state = t.state;
  for (ClientState& c : state.clients) c.speed_factor = slow.speed_of(c.id);
  const UnlearnRun r = run_async_unlearning(t.sc.spec, state, slow, job, 0);
  CHECK(r.timeline.latency() == doctest::Approx(base));
  CHECK(run_sync_unlearning(t.sc.spec, state, slow, job, 0).timeline.latency() > r.timeline.latency());
}

TEST_CASE("retained straggler speedup") {
  const auto& t = test::default_seed0();
  FederationConfig cfg = t.cfg.federation;
  cfg.speed_factors = {1, 1, 1, 1, 1};
  const int straggler = t.sc.target == 4 ? 3 : 4;
  cfg.speed_factors[static_cast<std::size_t>(straggler)] = 4.0;
  TrainingState state = t.state;
  for (ClientState& c : state.clients) c.speed_factor = cfg.speed_of(c.id);
  const UnlearnJob job = make_job(t.cfg, t.sc, Method::AfuIc);
  std::map<SyncMode, Timeline> timelines;
  for (SyncMode m : {SyncMode::Async, SyncMode::Sync}) {
    timelines[m] = run_unlearning(m, t.sc.spec, state, cfg, job, 0).timeline;
  }
  const EfficiencyReport eff = efficiency_report(timelines);
  CHECK(eff.speedup >= 3.0);
  for (const auto& [client, blocked] : eff.blocked_time.at(SyncMode::Async)) CHECK(blocked == 0.0);

  cfg.speed_factors.clear();
  for (ClientState& c : state.clients) c.speed_factor = 1.0;
  for (SyncMode m : {SyncMode::Async, SyncMode::Sync}) {
    timelines[m] = run_unlearning(m, t.sc.spec, state, cfg, job, 0).timeline;
  }
  CHECK(efficiency_report(timelines).speedup >= 1.0);
}
