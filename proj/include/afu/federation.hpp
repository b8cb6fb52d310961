#pragma once

// Synchronous FedAvg over simulated clients with a cost model for the
// simulated clock.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "afu/data_pipeline.hpp"
#include "afu/metrics_record.hpp"
#include "afu/tensor_nn.hpp"

namespace afu {

enum class SyncMode { Sync, Async };

const char* to_string(SyncMode mode);
SyncMode parse_sync_mode(const std::string& text);

// Compute costs one unit per sample per epoch, scaled by the client's speed
// factor; every message costs a fixed latency.
struct CostModel {
  double unit_cost_s = 1e-3;
  double comm_latency_s = 0.1;
  double server_speed = 0.25;  // server speed factor for calibration

  double compute_time(std::size_t samples, int epochs, double speed_factor) const {
    return static_cast<double>(samples) * epochs * unit_cost_s * speed_factor;
  }
};

struct FederationConfig {
  int n_clients = 5;
  double alpha = 1.0;
  int rounds = 30;
  int local_epochs = 2;
  int batch_size = 128;
  double lr = 0.1;
  SyncMode mode = SyncMode::Async;
  int post_rounds = 10;
  std::vector<double> speed_factors;  // empty means 1.0 for every client
  CostModel cost;

  double speed_of(int client) const;
  void validate() const;
};

struct ClientState {
  int id = 0;
  DatasetShard shard;
  ParamVector w_local_prev;  // last uploaded local model
  double speed_factor = 1.0;
  bool is_target = false;
};

std::vector<ClientState> make_clients(std::vector<DatasetShard> shards, const FederationConfig& cfg, int target);

// Minibatch SGD on cross-entropy, reshuffling every epoch.
ParamVector local_train(const ModelSpec& spec, const ParamVector& start, const DatasetShard& shard, int epochs,
                        int batch_size, double lr, std::uint64_t seed);

// Weighted mean of models, summed in the given order.
ParamVector weighted_average(const std::vector<ParamVector>& models, const std::vector<double>& weights);

// Fraction of samples whose argmax prediction equals the label.
double accuracy(const ModelSpec& spec, const ParamVector& w, const DatasetShard& data);

struct RoundResult {
  ParamVector w_next;
  double round_time = 0.0;  // slowest client's compute time
  double mean_update_norm = 0.0;
};

// One full-participation FedAvg round. Updates every client's cache.
RoundResult run_sync_round(const ModelSpec& spec, const ParamVector& w_g, std::vector<ClientState>& clients,
                           const FederationConfig& cfg, std::uint64_t round_seed);

struct TrainingState {
  ParamVector w_g;
  std::vector<ClientState> clients;
  double sim_time = 0.0;
  int rounds_run = 0;
  std::vector<double> update_norms;  // per round, mean over clients

  double mean_update_norm() const;
  std::size_t total_samples() const;
};

// Wall time of a round: broadcast, slowest client, upload.
double round_wall_time(const RoundResult& r, const CostModel& cost);

// cfg.rounds synchronous rounds from the seed's initialization. If
// implant_gate is given, the trained model must reach min_backdoor_accuracy
// on it or ScenarioError is thrown.
TrainingState run_training(const ModelSpec& spec, std::vector<ClientState> clients, const FederationConfig& cfg,
                           std::uint64_t seed, const DatasetShard* implant_gate = nullptr,
                           double min_backdoor_accuracy = 80.0);

using EvalHook = std::function<MetricsRecord(int round, const ParamVector& w, double sim_time)>;

// Retained-only FedAvg rounds; the hook runs on the start model and after each round.
std::vector<MetricsRecord> run_post_learning(const ModelSpec& spec, const ParamVector& w_start,
                                             std::vector<ClientState> retained, int post_rounds,
                                             const FederationConfig& cfg, std::uint64_t seed, double start_time,
                                             const EvalHook& hook, std::vector<ParamVector>* models = nullptr);

}  // namespace afu
