#include "afu/scheduler.hpp"

#include <algorithm>
#include <fstream>
#include <future>
#include <queue>

#include <json.hpp>

#include "afu/errors.hpp"
#include "afu/rng.hpp"

namespace afu {

namespace {

struct Later {
  bool operator()(const SimEvent& a, const SimEvent& b) const { return event_before(b, a); }
};

using EventQueue = std::priority_queue<SimEvent, std::vector<SimEvent>, Later>;

std::vector<DatasetShard> shards_of(const std::vector<ClientState>& clients) {
  std::vector<DatasetShard> shards;
  shards.reserve(clients.size());
  for (const ClientState& c : clients) shards.push_back(c.shard);
  return shards;
}

const ClientState& find_target(const TrainingState& state, int target) {
  for (const ClientState& c : state.clients) {
    if (c.id == target) return c;
  }
  throw ConfigError("unlearning target " + std::to_string(target) + " is not a federation member");
}

std::vector<ClientState> without(const std::vector<ClientState>& clients, int target) {
  std::vector<ClientState> out;
  for (const ClientState& c : clients) {
    if (c.id != target) out.push_back(c);
  }
  return out;
}

UnlearnOutcome compute_outcome(const ModelSpec& spec, const TrainingState& state, const FederationConfig& cfg,
                               const UnlearnJob& job, std::uint64_t seed) {
  if (job.calib_data == nullptr) throw ConfigError("unlearning job has no calibration set");
  const ClientState& target = find_target(state, job.target);
  UnlearnRequest request;
  request.target = job.target;
  request.target_speed = target.speed_factor;
  request.cost = cfg.cost;
  request.mean_update_norm = state.mean_update_norm();
  request.patch_source = job.patch_source;
  return afu_ic(spec, state.w_g, target.w_local_prev, shards_of(state.clients), request, job.unlearn, job.augment,
                *job.calib_data, seed);
}

// Full-participation round time on the simulated clock, including both messages.
double federation_round_time(const std::vector<ClientState>& clients, const FederationConfig& cfg) {
  double slowest = 0.0;
  for (const ClientState& c : clients) {
    slowest = std::max(slowest, cfg.cost.compute_time(c.shard.size(), cfg.local_epochs, c.speed_factor));
  }
  return slowest + 2.0 * cfg.cost.comm_latency_s;
}

void check_ready(const TrainingState& state) {
  if (state.clients.size() < 2) throw ConfigError("unlearning needs at least two clients");
  for (const ClientState& c : state.clients) {
    if (c.w_local_prev.size() != state.w_g.size()) {
      throw ConfigError("client " + std::to_string(c.id) + " has no cached local model");
    }
  }
}

}  // namespace

const char* to_string(EventKind kind) {
  switch (kind) {
    case EventKind::UnlearnRequested:
      return "UnlearnRequested";
    case EventKind::LocalUpdateReady:
      return "LocalUpdateReady";
    case EventKind::RoundAggregated:
      return "RoundAggregated";
    case EventKind::UnlearnUploadReady:
      return "UnlearnUploadReady";
    case EventKind::CalibrationDone:
      return "CalibrationDone";
  }
  return "?";
}

bool event_before(const SimEvent& a, const SimEvent& b) {
  if (a.time != b.time) return a.time < b.time;
  if (a.kind != b.kind) return static_cast<int>(a.kind) < static_cast<int>(b.kind);
  return a.client < b.client;
}

double Timeline::total_blocked_time() const {
  double total = 0.0;
  for (const auto& [client, t] : blocked_time_per_client) total += t;
  return total;
}

UnlearnRun run_async_unlearning(const ModelSpec& spec, const TrainingState& state, const FederationConfig& cfg,
                                const UnlearnJob& job, std::uint64_t seed) {
  check_ready(state);
  find_target(state, job.target);

  // The target's work shares nothing mutable with the provisional rounds below.
  auto pending = std::async(std::launch::async, [&] { return compute_outcome(spec, state, cfg, job, seed); });

  UnlearnRun run;
  run.retained = without(state.clients, job.target);
  Timeline& tl = run.timeline;
  tl.mode = SyncMode::Async;
  tl.seed = seed;
  tl.target = job.target;
  tl.request_time = state.sim_time;
  for (const ClientState& c : run.retained) tl.blocked_time_per_client[c.id] = 0.0;

  std::vector<ClientState> provisional = run.retained;
  ParamVector w_provisional = state.w_g;
  RoundResult in_flight;
  int round = 0;
  std::size_t arrived = 0;

  EventQueue queue;
  auto start_round = [&](double t) {
    in_flight = run_sync_round(spec, w_provisional, provisional, cfg,
                               derive_seed(seed, {stream::kProvisional, static_cast<std::uint64_t>(round)}));
    arrived = 0;
    for (const ClientState& c : provisional) {
      const double ready = t + 2.0 * cfg.cost.comm_latency_s +
                           cfg.cost.compute_time(c.shard.size(), cfg.local_epochs, c.speed_factor);
      queue.push({ready, EventKind::LocalUpdateReady, c.id, "provisional round " + std::to_string(round)});
    }
  };

  queue.push({tl.request_time, EventKind::UnlearnRequested, job.target, "target starts local ascent"});
  start_round(tl.request_time);

  bool adopted = false;
  while (!queue.empty() && !adopted) {
    SimEvent ev = queue.top();
    queue.pop();
    switch (ev.kind) {
      case EventKind::UnlearnRequested: {
        run.outcome = pending.get();
        queue.push({ev.time + run.outcome.local_compute_cost + cfg.cost.comm_latency_s, EventKind::UnlearnUploadReady,
                    job.target, "w_unlearn uploaded after " + std::to_string(run.outcome.ascent_epochs_run) +
                                    " ascent epochs"});
        break;
      }
      case EventKind::LocalUpdateReady:
        if (++arrived == provisional.size()) {
          queue.push({ev.time, EventKind::RoundAggregated, kServer, "provisional round " + std::to_string(round)});
        }
        break;
      case EventKind::RoundAggregated:
        w_provisional = std::move(in_flight.w_next);
        ++round;
        start_round(ev.time);
        break;
      case EventKind::UnlearnUploadReady:
        queue.push({ev.time + run.outcome.calib_compute_cost, EventKind::CalibrationDone, kServer,
                    "calibrated over " + std::to_string(run.outcome.calib_epochs_run) + " epochs"});
        break;
      case EventKind::CalibrationDone:
        ev.note += "; adopted, " + std::to_string(round + 1) + " provisional rounds discarded";
        tl.adoption_time = ev.time;
        tl.discarded_rounds = round + 1;
        adopted = true;
        break;
    }
    tl.events.push_back(std::move(ev));
  }

  run.w_g_next = run.outcome.w_calibrated;
  return run;
}

UnlearnRun run_sync_unlearning(const ModelSpec& spec, const TrainingState& state, const FederationConfig& cfg,
                               const UnlearnJob& job, std::uint64_t seed) {
  check_ready(state);
  find_target(state, job.target);

  UnlearnRun run;
  run.outcome = compute_outcome(spec, state, cfg, job, seed);
  run.retained = without(state.clients, job.target);
  Timeline& tl = run.timeline;
  tl.mode = SyncMode::Sync;
  tl.seed = seed;
  tl.target = job.target;
  tl.request_time = state.sim_time;

  const double round_time = federation_round_time(state.clients, cfg);
  const int rounds = std::max(1, run.outcome.ascent_epochs_run);
  const double epoch_cost = run.outcome.local_compute_cost / rounds;

  EventQueue queue;
  queue.push({tl.request_time, EventKind::UnlearnRequested, job.target, "federation halted"});
  for (int r = 0; r < rounds; ++r) {
    const double begin = tl.request_time + r * round_time;
    queue.push({begin + 2.0 * cfg.cost.comm_latency_s + epoch_cost, EventKind::LocalUpdateReady, job.target,
                "ascent epoch " + std::to_string(r)});
    const EventKind close = r + 1 == rounds ? EventKind::UnlearnUploadReady : EventKind::RoundAggregated;
    queue.push({begin + round_time, close, kServer, "barrier " + std::to_string(r)});
  }

  while (!queue.empty()) {
    SimEvent ev = queue.top();
    queue.pop();
    if (ev.kind == EventKind::UnlearnUploadReady) {
      queue.push({ev.time + run.outcome.calib_compute_cost, EventKind::CalibrationDone, kServer,
                  "calibrated over " + std::to_string(run.outcome.calib_epochs_run) + " epochs; federation resumes"});
    } else if (ev.kind == EventKind::CalibrationDone) {
      tl.adoption_time = ev.time;
    }
    tl.events.push_back(std::move(ev));
  }

  for (const ClientState& c : run.retained) tl.blocked_time_per_client[c.id] = tl.latency();
  run.w_g_next = run.outcome.w_calibrated;
  return run;
}

UnlearnRun run_unlearning(SyncMode mode, const ModelSpec& spec, const TrainingState& state,
                          const FederationConfig& cfg, const UnlearnJob& job, std::uint64_t seed) {
  return mode == SyncMode::Sync ? run_sync_unlearning(spec, state, cfg, job, seed)
                                : run_async_unlearning(spec, state, cfg, job, seed);
}

void write_timeline_jsonl(std::ostream& os, const Timeline& timeline) {
  for (const SimEvent& ev : timeline.events) {
    nlohmann::json line = {{"t", ev.time}, {"kind", to_string(ev.kind)}, {"client", ev.client}, {"note", ev.note}};
    os << line.dump() << '\n';
  }
}

void write_timeline_jsonl(const std::filesystem::path& path, const Timeline& timeline) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write timeline " + path.string());
  write_timeline_jsonl(os, timeline);
}

}  // namespace afu
