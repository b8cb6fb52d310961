#include "afu/federation.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "afu/errors.hpp"
#include "afu/rng.hpp"

namespace afu {

const char* to_string(SyncMode mode) { return mode == SyncMode::Sync ? "sync" : "async"; }

SyncMode parse_sync_mode(const std::string& text) {
  if (text == "sync") return SyncMode::Sync;
  if (text == "async") return SyncMode::Async;
  throw ConfigError("mode must be 'sync' or 'async', got '" + text + "'");
}

double FederationConfig::speed_of(int client) const {
  if (speed_factors.empty()) return 1.0;
  return speed_factors.at(static_cast<std::size_t>(client));
}

void FederationConfig::validate() const {
  if (n_clients < 2) throw ConfigError("federation.n_clients must be >= 2");
  if (!(alpha > 0.0)) throw ConfigError("federation.alpha must be > 0");
  if (rounds < 0) throw ConfigError("federation.rounds must be >= 0");
  if (local_epochs < 1) throw ConfigError("federation.local_epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("federation.batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("federation.lr must be > 0");
  if (post_rounds < 0) throw ConfigError("federation.post_rounds must be >= 0");
  if (!speed_factors.empty() && speed_factors.size() != static_cast<std::size_t>(n_clients)) {
    throw ConfigError("federation.speed_factors needs one entry per client");
  }
  for (double s : speed_factors) {
    if (!(s > 0.0)) throw ConfigError("federation.speed_factors must be > 0");
  }
  if (!(cost.unit_cost_s > 0.0) || !(cost.comm_latency_s >= 0.0) || !(cost.server_speed > 0.0)) {
    throw ConfigError("federation cost model values must be positive");
  }
}

std::vector<ClientState> make_clients(std::vector<DatasetShard> shards, const FederationConfig& cfg, int target) {
  std::vector<ClientState> clients;
  clients.reserve(shards.size());
  for (std::size_t k = 0; k < shards.size(); ++k) {
    ClientState c;
    c.id = static_cast<int>(k);
    c.shard = std::move(shards[k]);
    c.speed_factor = cfg.speed_of(c.id);
    c.is_target = c.id == target;
    clients.push_back(std::move(c));
  }
  return clients;
}

ParamVector local_train(const ModelSpec& spec, const ParamVector& start, const DatasetShard& shard, int epochs,
                        int batch_size, double lr, std::uint64_t seed) {
  ParamVector w = start;
  if (shard.empty()) return w;
  std::vector<std::size_t> order(shard.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  auto opt = OptimizerState<double>::sgd(lr);
  const auto bs = static_cast<std::size_t>(batch_size);
  for (int e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < order.size(); begin += bs) {
      const std::size_t end = std::min(order.size(), begin + bs);
      const Batch<double> batch = make_batch(shard, std::span(order).subspan(begin, end - begin));
      const auto lg = loss_and_grad(spec, w, batch, Loss<double>::cross_entropy());
      w = optimizer_step(opt, w, lg.grad, Direction::Descent);
    }
  }
  return w;
}

ParamVector weighted_average(const std::vector<ParamVector>& models, const std::vector<double>& weights) {
  if (models.empty() || models.size() != weights.size()) throw ConfigError("weighted_average: bad inputs");
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(total > 0.0)) throw ConfigError("weighted_average: weights must sum to a positive value");
  ParamVector acc = ParamVector::Zero(models.front().size());
  for (std::size_t k = 0; k < models.size(); ++k) {
    if (models[k].size() != acc.size()) throw ConfigError("weighted_average: model length mismatch");
    acc += weights[k] * models[k];
  }
  return acc / total;
}

double accuracy(const ModelSpec& spec, const ParamVector& w, const DatasetShard& data) {
  if (data.empty()) throw EvaluationError("accuracy: empty dataset");
  const Batch<double> batch = make_batch(data);
  const std::vector<int> pred = argmax_rows(forward(spec, w, batch.inputs));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == batch.labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

RoundResult run_sync_round(const ModelSpec& spec, const ParamVector& w_g, std::vector<ClientState>& clients,
                           const FederationConfig& cfg, std::uint64_t round_seed) {
  if (clients.empty()) throw ConfigError("run_sync_round: no clients");
  std::vector<ParamVector> locals;
  std::vector<double> weights;
  locals.reserve(clients.size());
  RoundResult result;
  double norm_sum = 0.0;
  for (ClientState& c : clients) {
    if (c.shard.empty()) throw ConfigError("run_sync_round: client " + std::to_string(c.id) + " has no data");
    ParamVector w = local_train(spec, w_g, c.shard, cfg.local_epochs, cfg.batch_size, cfg.lr,
                                derive_seed(round_seed, {static_cast<std::uint64_t>(c.id)}));
    norm_sum += l2_distance(w, w_g);
    result.round_time =
        std::max(result.round_time, cfg.cost.compute_time(c.shard.size(), cfg.local_epochs, c.speed_factor));
    c.w_local_prev = w;
    weights.push_back(static_cast<double>(c.shard.size()));
    locals.push_back(std::move(w));
  }
  result.w_next = weighted_average(locals, weights);
  result.mean_update_norm = norm_sum / static_cast<double>(clients.size());
  return result;
}

double TrainingState::mean_update_norm() const {
  if (update_norms.empty()) return 0.0;
  return std::accumulate(update_norms.begin(), update_norms.end(), 0.0) / static_cast<double>(update_norms.size());
}

std::size_t TrainingState::total_samples() const {
  std::size_t n = 0;
  for (const ClientState& c : clients) n += c.shard.size();
  return n;
}

double round_wall_time(const RoundResult& r, const CostModel& cost) { return r.round_time + 2.0 * cost.comm_latency_s; }

TrainingState run_training(const ModelSpec& spec, std::vector<ClientState> clients, const FederationConfig& cfg,
                           std::uint64_t seed, const DatasetShard* implant_gate, double min_backdoor_accuracy) {
  TrainingState state;
  state.w_g = initialize_params(spec, derive_seed(seed, {stream::kInit}));
  state.clients = std::move(clients);
  for (ClientState& c : state.clients) c.w_local_prev = state.w_g;
  for (int r = 0; r < cfg.rounds; ++r) {
    RoundResult rr = run_sync_round(spec, state.w_g, state.clients, cfg,
                                    derive_seed(seed, {stream::kTrain, static_cast<std::uint64_t>(r)}));
    state.w_g = std::move(rr.w_next);
    state.sim_time += round_wall_time(rr, cfg.cost);
    state.update_norms.push_back(rr.mean_update_norm);
    ++state.rounds_run;
  }
  if (implant_gate != nullptr) {
    const double ba = 100.0 * accuracy(spec, state.w_g, *implant_gate);
    if (ba < min_backdoor_accuracy) {
      throw ScenarioError("backdoor failed to implant: BA " + std::to_string(ba) + "% < " +
                          std::to_string(min_backdoor_accuracy) + "%");
    }
  }
  return state;
}

std::vector<MetricsRecord> run_post_learning(const ModelSpec& spec, const ParamVector& w_start,
                                             std::vector<ClientState> retained, int post_rounds,
                                             const FederationConfig& cfg, std::uint64_t seed, double start_time,
                                             const EvalHook& hook, std::vector<ParamVector>* models) {
  for (const ClientState& c : retained) {
    if (c.is_target) throw ConfigError("run_post_learning: the target client must not participate");
  }
  std::vector<MetricsRecord> trajectory;
  ParamVector w = w_start;
  double t = start_time;
  if (models != nullptr) models->assign(1, w);
  if (hook) trajectory.push_back(hook(0, w, t));
  for (int r = 1; r <= post_rounds; ++r) {
    RoundResult rr = run_sync_round(spec, w, retained, cfg, derive_seed(seed, {static_cast<std::uint64_t>(r)}));
    w = std::move(rr.w_next);
    t += round_wall_time(rr, cfg.cost);
    if (models != nullptr) models->push_back(w);
    if (hook) trajectory.push_back(hook(r, w, t));
  }
  return trajectory;
}

}  // namespace afu
