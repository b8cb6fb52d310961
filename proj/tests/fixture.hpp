#pragma once

// Default scenario, seed 0, trained once per test binary.

#include "afu/config.hpp"
#include "afu/experiment.hpp"

namespace afu::test {

struct Trained {
  ExperimentConfig cfg;
  Scenario sc;
  TrainingState state;
  TrainingState oracle;
};

inline const Trained& default_seed0() {
  static const Trained t = [] {
    const ExperimentConfig cfg = parse_config_text("");
    Scenario sc = build_scenario(cfg, 0);
    TrainingState state = train_federation(cfg, sc, 0);
    TrainingState oracle = retrain_oracle(sc.spec, retained_clients(state, sc.target), cfg.federation, 0);
    return Trained{cfg, std::move(sc), std::move(state), std::move(oracle)};
  }();
  return t;
}

inline UnlearnRequest request_for(const Trained& t) {
  UnlearnRequest r;
  r.target = t.sc.target;
  r.target_speed = t.cfg.federation.speed_of(t.sc.target);
  r.cost = t.cfg.federation.cost;
  r.mean_update_norm = t.state.mean_update_norm();
  r.patch_source = &t.cfg.trigger;
  return r;
}

inline std::vector<DatasetShard> shards_of(const TrainingState& s) {
  std::vector<DatasetShard> out;
  for (const ClientState& c : s.clients) out.push_back(c.shard);
  return out;
}

}  // namespace afu::test
