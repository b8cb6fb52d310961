#pragma once

// Discrete-event scheduling of an unlearning request. Both modes run the same
// afu_ic arithmetic; they differ only in how the simulated clock advances and
// in whether retained clients keep training while the target unlearns.

#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "afu/federation.hpp"
#include "afu/unlearning.hpp"

namespace afu {

// Declaration order is the tie-break priority for simultaneous events.
enum class EventKind { UnlearnRequested, LocalUpdateReady, RoundAggregated, UnlearnUploadReady, CalibrationDone };

const char* to_string(EventKind kind);

inline constexpr int kServer = -1;

struct SimEvent {
  double time = 0.0;
  EventKind kind = EventKind::UnlearnRequested;
  int client = kServer;
  std::string note;
};

// Orders by (time, kind, client).
bool event_before(const SimEvent& a, const SimEvent& b);

struct Timeline {
  SyncMode mode = SyncMode::Async;
  std::uint64_t seed = 0;
  int target = 0;
  double request_time = 0.0;
  double adoption_time = 0.0;
  int discarded_rounds = 0;  // provisional retained rounds dropped at adoption
  std::vector<SimEvent> events;
  std::map<int, double> blocked_time_per_client;  // retained clients only

  double latency() const { return adoption_time - request_time; }
  double total_blocked_time() const;
};

struct UnlearnRun {
  ParamVector w_g_next;
  Timeline timeline;
  UnlearnOutcome outcome;
  std::vector<ClientState> retained;  // committed client state, target removed
};

struct UnlearnJob {
  int target = 0;
  UnlearnConfig unlearn;
  AugmentSpec augment;
  const DatasetShard* calib_data = nullptr;
  const TriggerSpec* patch_source = nullptr;
};

// The target computes afu_ic off the critical path while retained clients keep
// running provisional FedAvg rounds. The server adopts w_calibrated at
// CalibrationDone and drops the provisional line. Retained blocked time is 0.
UnlearnRun run_async_unlearning(const ModelSpec& spec, const TrainingState& state, const FederationConfig& cfg,
                                const UnlearnJob& job, std::uint64_t seed);

// The federation halts at t0. Each ascent epoch occupies one synchronous round,
// and a round closes only when the slowest client could have reported, so its
// length is the full-federation round time. Retained clients idle until the
// calibrated model is broadcast.
UnlearnRun run_sync_unlearning(const ModelSpec& spec, const TrainingState& state, const FederationConfig& cfg,
                               const UnlearnJob& job, std::uint64_t seed);

UnlearnRun run_unlearning(SyncMode mode, const ModelSpec& spec, const TrainingState& state,
                          const FederationConfig& cfg, const UnlearnJob& job, std::uint64_t seed);

// One JSON object per line: {"t", "kind", "client", "note"}.
void write_timeline_jsonl(std::ostream& os, const Timeline& timeline);
void write_timeline_jsonl(const std::filesystem::path& path, const Timeline& timeline);

}  // namespace afu
