#include <doctest.h>

#include <cmath>
#include <sstream>

#include "afu/errors.hpp"
#include "afu/metrics.hpp"
#include "fixture.hpp"

using namespace afu;

namespace {

// Zero weights except a large bias on one output class: predicts that class everywhere.
ParamVector constant_predictor(const ModelSpec& spec, int cls) {
  ParamVector w = ParamVector::Zero(spec.param_count());
  const LayerPlan& last = spec.plan().back();
  w[last.offset + last.weight_count + cls] = 10.0;
  return w;
}

}  // namespace

TEST_CASE("backdoor accuracy of constant predictors") {
  const ModelSpec spec = ModelSpec::dense(3);
  const DatasetShard test = generate_synthetic(3, 10, 1);
  TriggerSpec t;
  const DatasetShard poisoned = inject_backdoor(test, test, t, 1).poisoned_testset;
  CHECK(backdoor_accuracy(spec, constant_predictor(spec, t.target_class), poisoned) == 100.0);
  CHECK(backdoor_accuracy(spec, constant_predictor(spec, (t.target_class + 1) % 3), poisoned) == 0.0);
}

TEST_CASE("clean accuracy extremes") {
  const ModelSpec spec = ModelSpec::dense(3);
  DatasetShard one_class = generate_synthetic(3, 10, 2);
  std::erase_if(one_class.samples, [](const Sample& s) { return s.label != 2; });
  CHECK(clean_accuracy(spec, constant_predictor(spec, 2), one_class) == 100.0);
  // Any constant predictor on a balanced set scores exactly chance.
  const DatasetShard balanced = generate_synthetic(3, 10, 2);
  for (int c = 0; c < 3; ++c) CHECK(clean_accuracy(spec, constant_predictor(spec, c), balanced) == doctest::Approx(100.0 / 3));
  DatasetShard empty = balanced;
  empty.samples.clear();
  CHECK_THROWS(clean_accuracy(spec, constant_predictor(spec, 0), empty));
}

TEST_CASE("oracle row and candidate rows") {
  const auto& t = test::default_seed0();
  RevertingInput in;
  in.spec = &t.sc.spec;
  in.oracle = t.oracle.w_g;
  in.retained = retained_clients(t.state, t.sc.target);
  in.post_rounds = 2;
  in.federation = t.cfg.federation;
  in.sets = t.sc.eval_sets();
  in.seed = 3;
  in.candidates["same"] = t.oracle.w_g;
  const auto rows = reverting_analysis(in);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].method == kOracleName);
  CHECK(rows[0].instant.l2_to_oracle == 0.0);
  CHECK(rows[0].recovered.l2_to_oracle == 0.0);
  CHECK(rows[0].trajectory.size() == 3);
  // Same start and seed as the oracle, so the whole trajectory coincides.
  for (const MetricsRecord& m : rows[1].trajectory) CHECK(m.l2_to_oracle == 0.0);
  CHECK(rows[1].recovered.ba == rows[0].recovered.ba);
  CHECK(rows[0].instant.tag == Checkpoint::Instant);
  CHECK(rows[0].recovered.tag == Checkpoint::PostRecovery);
}

TEST_CASE("evaluate without an oracle") {
  const auto& t = test::default_seed0();
  const MetricsRecord m = evaluate(t.sc.spec, t.state.w_g, t.sc.eval_sets(), nullptr, 0, 0.0, Checkpoint::Instant);
  CHECK(std::isnan(m.l2_to_oracle));
  CHECK(m.ba >= 80.0);
}

TEST_CASE("efficiency report") {
  Timeline async_tl, sync_tl;
  async_tl.request_time = 0.0;
  async_tl.adoption_time = 2.0;
  async_tl.blocked_time_per_client = {{0, 0.0}, {1, 0.0}};
  sync_tl.mode = SyncMode::Sync;
  sync_tl.request_time = 0.0;
  sync_tl.adoption_time = 7.0;
  sync_tl.blocked_time_per_client = {{0, 6.0}, {1, 5.0}};
  const EfficiencyReport r = efficiency_report({{SyncMode::Async, async_tl}, {SyncMode::Sync, sync_tl}});
  CHECK(r.speedup == doctest::Approx(3.5));
  CHECK(r.latency.at(SyncMode::Async) == 2.0);
  CHECK(r.blocked_time.at(SyncMode::Sync).at(0) == 6.0);
  CHECK(efficiency_report({{SyncMode::Async, async_tl}}).speedup == 0.0);
  CHECK_THROWS_AS(efficiency_report({{SyncMode::Sync, async_tl}}), EvaluationError);
  CHECK_THROWS_AS(efficiency_report({}), EvaluationError);
}

TEST_CASE("table csv layout") {
  MetricsRecord m;
  m.ba = 12.25;
  m.ca = 99.5;
  m.l2_to_oracle = 0.123456;
  m.sim_time = 1.5;
  m.tag = Checkpoint::PostRecovery;
  std::ostringstream os;
  write_table_csv(os, {{"afu_ic", m}});
  CHECK(os.str() == std::string(kTableHeader) + "\nafu_ic,post_recovery,12.25,99.50,0.1235,1.500\n");
}
