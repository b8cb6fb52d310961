#include "afu/unlearning.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "afu/errors.hpp"
#include "afu/rng.hpp"
#include "binary_io.hpp"

namespace afu {

namespace {
constexpr std::uint32_t kCheckpointVersion = 1;
}

const char* to_string(WeightBasis basis) { return basis == WeightBasis::Samples ? "samples" : "clients"; }

WeightBasis parse_weight_basis(const std::string& text) {
  if (text == "samples") return WeightBasis::Samples;
  if (text == "clients") return WeightBasis::Clients;
  throw ConfigError("weight_basis must be 'samples' or 'clients', got '" + text + "'");
}

const char* to_string(OptimizerKind kind) { return kind == OptimizerKind::Sgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer_kind(const std::string& text) {
  if (text == "sgd") return OptimizerKind::Sgd;
  if (text == "adam") return OptimizerKind::Adam;
  throw ConfigError("optimizer must be 'sgd' or 'adam', got '" + text + "'");
}

void UnlearnConfig::validate() const {
  if (!(eta_asc > 0.0)) throw ConfigError("unlearn.eta_asc must be > 0");
  if (!(eta_calib > 0.0)) throw ConfigError("unlearn.eta_calib must be > 0");
  if (delta && !(*delta > 0.0)) throw ConfigError("unlearn.delta must be > 0");
  if (!(delta_scale > 0.0)) throw ConfigError("unlearn.delta_scale must be > 0");
  if (t_asc < 0) throw ConfigError("unlearn.t_asc must be >= 0");
  if (t_calib < 0) throw ConfigError("unlearn.t_calib must be >= 0");
  if (!(gamma_calib >= 0.0)) throw ConfigError("unlearn.gamma_calib must be >= 0");
  if (early_stop_acc && !(*early_stop_acc >= 0.0 && *early_stop_acc <= 1.0)) {
    throw ConfigError("unlearn.early_stop_acc must be in [0, 1]");
  }
  if (batch_size < 1 || calib_batch_size < 1) throw ConfigError("unlearn batch sizes must be >= 1");
  if (calib_samples < 1) throw ConfigError("unlearn.calib_samples must be >= 1");
}

double UnlearnConfig::resolved_delta(double mean_update_norm) const {
  if (delta) return *delta;
  const double d = delta_scale * mean_update_norm;
  if (!(d > 0.0)) throw ConfigError("cannot derive delta: no local update norms recorded");
  return d;
}

double UnlearnConfig::resolved_early_stop(int num_classes) const {
  return early_stop_acc ? *early_stop_acc : 1.0 / num_classes + 0.05;
}

AscentResult local_gradient_ascent(const ModelSpec& spec, const ParamVector& w_ref, const DatasetShard& d_u,
                                   const UnlearnConfig& cfg, double delta, std::uint64_t seed,
                                   const IterateHook& on_iterate) {
  if (d_u.empty()) throw ConfigError("local_gradient_ascent: target dataset is empty");
  AscentResult result{w_ref, 0};
  const double stop_at = cfg.resolved_early_stop(spec.num_classes());
  OptimizerState<double> opt = cfg.ascent_optimizer == OptimizerKind::Sgd ? OptimizerState<double>::sgd(cfg.eta_asc)
                                                                          : OptimizerState<double>::adam(cfg.eta_asc);
  std::vector<std::size_t> order(d_u.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 0; epoch < cfg.t_asc; ++epoch) {
    if (accuracy(spec, result.w, d_u) <= stop_at) break;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t begin = 0; begin < order.size(); begin += bs) {
      const std::size_t end = std::min(order.size(), begin + bs);
      const Batch<double> batch = make_batch(d_u, std::span(order).subspan(begin, end - begin));
      LossAndGrad<double> lg;
      try {
        lg = loss_and_grad(spec, result.w, batch, Loss<double>::cross_entropy());
      } catch (const NumericalError& e) {
        throw NumericalError(std::string("gradient ascent diverged (eta_asc too large?): ") + e.what());
      }
      result.w = project_l2_ball(optimizer_step(opt, result.w, lg.grad, Direction::Ascent), w_ref, delta);
      if (on_iterate) on_iterate(result.w);
    }
    ++result.epochs_run;
  }
  return result;
}

CalibrationResult server_calibrate(const ModelSpec& spec, const ParamVector& w_unlearn, const DatasetShard& calib_data,
                                   const AugmentSpec& aug, const UnlearnConfig& cfg, std::uint64_t seed,
                                   const TriggerSpec* patch_source) {
  if (calib_data.empty()) throw ConfigError("server_calibrate: calibration set is empty");
  if (!(cfg.gamma_calib >= 0.0)) throw ConfigError("server_calibrate: gamma_calib must be >= 0");
  CalibrationResult result{w_unlearn, 0, {}};
  if (cfg.gamma_calib == 0.0) return result;

  OptimizerState<double> opt = cfg.calib_optimizer == OptimizerKind::Sgd
                                   ? OptimizerState<double>::sgd(cfg.eta_calib)
                                   : OptimizerState<double>::adam(cfg.eta_calib);
  std::vector<std::size_t> order(calib_data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, {0}));
  const auto bs = static_cast<std::size_t>(cfg.calib_batch_size);
  DatasetShard augmented{calib_data.owner, calib_data.shape, calib_data.num_classes, {}};
  for (int epoch = 0; epoch < cfg.t_calib; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double kl_sum = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += bs) {
      const std::size_t end = std::min(order.size(), begin + bs);
      const auto idx = std::span(order).subspan(begin, end - begin);
      augmented.samples.clear();
      for (std::size_t i : idx) {
        augmented.samples.push_back(augment(calib_data.samples[i], aug,
                                            derive_seed(seed, {1, static_cast<std::uint64_t>(epoch), i}),
                                            calib_data.shape, patch_source));
      }
      const Batch<double> clean = make_batch(calib_data, idx);
      Batch<double> views = make_batch(augmented);
      views.labels.clear();
      LossAndGrad<double> lg;
      try {
        lg = loss_and_grad(spec, result.w, views, Loss<double>::kl_to_reference(forward(spec, result.w, clean.inputs)));
      } catch (const NumericalError& e) {
        throw NumericalError(std::string("calibration diverged (eta_calib too large?): ") + e.what());
      }
      kl_sum += lg.loss * static_cast<double>(idx.size());
      result.w = optimizer_step(opt, result.w, ParamVector(cfg.gamma_calib * lg.grad), Direction::Descent);
    }
    result.epoch_mean_kl.push_back(kl_sum / static_cast<double>(order.size()));
    ++result.epochs_run;
  }
  return result;
}

UnlearnOutcome afu_ic(const ModelSpec& spec, const ParamVector& w_g, const ParamVector& w_u_prev,
                      const std::vector<DatasetShard>& shards, const UnlearnRequest& request, const UnlearnConfig& cfg,
                      const AugmentSpec& aug, const DatasetShard& calib_data, std::uint64_t seed) {
  cfg.validate();
  if (request.target < 0 || static_cast<std::size_t>(request.target) >= shards.size()) {
    throw ConfigError("afu_ic: target client out of range");
  }
  const DatasetShard& d_u = shards[static_cast<std::size_t>(request.target)];
  double n_total = 0.0, n_u = 0.0;
  if (cfg.weight_basis == WeightBasis::Samples) {
    for (const DatasetShard& s : shards) n_total += static_cast<double>(s.size());
    n_u = static_cast<double>(d_u.size());
  } else {
    n_total = static_cast<double>(shards.size());
    n_u = 1.0;
  }

  UnlearnOutcome out;
  out.delta = cfg.resolved_delta(request.mean_update_norm);
  out.w_ref = compute_reference_model(w_g, w_u_prev, n_total, n_u);
  AscentResult asc = local_gradient_ascent(spec, out.w_ref, d_u, cfg, out.delta, derive_seed(seed, {stream::kAscent}));
  out.w_unlearn = std::move(asc.w);
  out.ascent_epochs_run = asc.epochs_run;
  out.local_compute_cost = request.cost.compute_time(d_u.size(), asc.epochs_run, request.target_speed);

  CalibrationResult cal = server_calibrate(spec, out.w_unlearn, calib_data, aug, cfg,
                                           derive_seed(seed, {stream::kCalibration}), request.patch_source);
  out.w_calibrated = std::move(cal.w);
  out.calib_epochs_run = cal.epochs_run;
  out.calib_epoch_kl = std::move(cal.epoch_mean_kl);
  out.calib_compute_cost = request.cost.compute_time(calib_data.size(), cal.epochs_run, request.cost.server_speed);
  return out;
}

UnlearnOutcome pga_only(const ModelSpec& spec, const ParamVector& w_g, const ParamVector& w_u_prev,
                        const std::vector<DatasetShard>& shards, const UnlearnRequest& request, UnlearnConfig cfg,
                        std::uint64_t seed) {
  cfg.gamma_calib = 0.0;
  const DatasetShard no_calibration{-1, shards.front().shape, shards.front().num_classes, {Sample{}}};
  return afu_ic(spec, w_g, w_u_prev, shards, request, cfg, AugmentSpec{}, no_calibration, seed);
}

TrainingState retrain_oracle(const ModelSpec& spec, std::vector<ClientState> retained, const FederationConfig& cfg,
                             std::uint64_t seed) {
  if (retained.empty()) throw ConfigError("retrain_oracle: needs at least one retained client");
  for (const ClientState& c : retained) {
    if (c.is_target) throw ConfigError("retrain_oracle: the target client must be excluded");
  }
  return run_training(spec, std::move(retained), cfg, seed);
}

void save_params(const std::filesystem::path& path, const ParamVector& w) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write checkpoint " + path.string());
  binary::write_magic(os, "FUPV");
  binary::write_le<std::uint32_t>(os, kCheckpointVersion);
  binary::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(w.size()));
  for (Eigen::Index i = 0; i < w.size(); ++i) binary::write_le<double>(os, w[i]);
}

ParamVector load_params(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open checkpoint " + path.string());
  binary::expect_magic(is, "FUPV");
  const auto version = binary::read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  const auto n = binary::read_le<std::uint64_t>(is);
  ParamVector w(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = binary::read_le<double>(is);
  return w;
}

}  // namespace afu
