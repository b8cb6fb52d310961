#pragma once

// Asynchronous federated unlearning with invariance calibration:
// reference-model construction, projected gradient ascent on the target's
// data, server-side KL calibration on augmented views, and the retraining and
// PGA-only comparators.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "afu/data_pipeline.hpp"
#include "afu/federation.hpp"
#include "afu/tensor_nn.hpp"

namespace afu {

// How n_total / n_u are counted when removing the target's contribution.
enum class WeightBasis { Samples, Clients };

const char* to_string(WeightBasis basis);
WeightBasis parse_weight_basis(const std::string& text);
const char* to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(const std::string& text);

struct UnlearnConfig {
  double eta_asc = 0.01;
  double eta_calib = 0.001;
  std::optional<double> delta;  // empty: delta_scale * mean local update norm
  double delta_scale = 3.0;
  int t_asc = 20;
  int t_calib = 5;
  double gamma_calib = 1.0;
  std::optional<double> early_stop_acc;  // empty: 1 / num_classes + 0.05
  int batch_size = 128;
  int calib_batch_size = 128;
  int calib_samples = 256;
  OptimizerKind ascent_optimizer = OptimizerKind::Sgd;
  OptimizerKind calib_optimizer = OptimizerKind::Adam;
  WeightBasis weight_basis = WeightBasis::Samples;

  void validate() const;
  double resolved_delta(double mean_update_norm) const;
  double resolved_early_stop(int num_classes) const;
};

struct UnlearnOutcome {
  ParamVector w_ref;
  ParamVector w_unlearn;
  ParamVector w_calibrated;
  int ascent_epochs_run = 0;
  int calib_epochs_run = 0;
  double delta = 0.0;
  double local_compute_cost = 0.0;  // simulated seconds on the target client
  double calib_compute_cost = 0.0;  // simulated seconds on the server
  std::vector<double> calib_epoch_kl;
};

// (n_total * w_g - n_u * w_u_prev) / (n_total - n_u)
template <typename Scalar>
VectorX<Scalar> compute_reference_model(const VectorX<Scalar>& w_g, const VectorX<Scalar>& w_u_prev, Scalar n_total,
                                        Scalar n_u) {
  if (w_g.size() != w_u_prev.size()) throw ConfigError("compute_reference_model: length mismatch");
  if (!(n_u > Scalar(0))) throw ConfigError("compute_reference_model: n_u must be > 0");
  if (!(n_u < n_total)) throw ConfigError("compute_reference_model: cannot unlearn the whole federation (n_u >= n_total)");
  return (n_total * w_g - n_u * w_u_prev) / (n_total - n_u);
}

// Euclidean projection onto the ball B(center, delta).
template <typename Scalar>
VectorX<Scalar> project_l2_ball(const VectorX<Scalar>& w, const VectorX<Scalar>& center, Scalar delta) {
  if (w.size() != center.size()) throw ConfigError("project_l2_ball: length mismatch");
  if (!(delta > Scalar(0))) throw ConfigError("project_l2_ball: delta must be > 0");
  const VectorX<Scalar> d = w - center;
  const Scalar norm = d.norm();
  if (norm <= delta) return w;
  return center + (delta / norm) * d;
}

using IterateHook = std::function<void(const ParamVector&)>;

struct AscentResult {
  ParamVector w;
  int epochs_run = 0;
};

// Up to t_asc epochs of projected minibatch gradient ascent on cross-entropy
// over d_u, starting at w_ref. Stops at the start of an epoch once accuracy on
// d_u is at or below the early-stop threshold.
AscentResult local_gradient_ascent(const ModelSpec& spec, const ParamVector& w_ref, const DatasetShard& d_u,
                                   const UnlearnConfig& cfg, double delta, std::uint64_t seed,
                                   const IterateHook& on_iterate = {});

struct CalibrationResult {
  ParamVector w;
  int epochs_run = 0;
  std::vector<double> epoch_mean_kl;  // mean KL(P(.|x) || P(.|x')) seen during each epoch
};

// Minimizes gamma_calib * mean KL(P(.|x; w) || P(.|augment(x); w)) with the
// clean side detached. gamma_calib == 0 returns w_unlearn untouched.
CalibrationResult server_calibrate(const ModelSpec& spec, const ParamVector& w_unlearn, const DatasetShard& calib_data,
                                   const AugmentSpec& aug, const UnlearnConfig& cfg, std::uint64_t seed,
                                   const TriggerSpec* patch_source = nullptr);

struct UnlearnRequest {
  int target = 0;
  double target_speed = 1.0;
  CostModel cost;
  double mean_update_norm = 0.0;  // used when cfg.delta is unset
  const TriggerSpec* patch_source = nullptr;
};

// Reference model -> projected ascent -> server calibration.
UnlearnOutcome afu_ic(const ModelSpec& spec, const ParamVector& w_g, const ParamVector& w_u_prev,
                      const std::vector<DatasetShard>& shards, const UnlearnRequest& request, const UnlearnConfig& cfg,
                      const AugmentSpec& aug, const DatasetShard& calib_data, std::uint64_t seed);

// afu_ic with the calibration weight forced to zero.
UnlearnOutcome pga_only(const ModelSpec& spec, const ParamVector& w_g, const ParamVector& w_u_prev,
                        const std::vector<DatasetShard>& shards, const UnlearnRequest& request, UnlearnConfig cfg,
                        std::uint64_t seed);

// Fresh FedAvg training on the retained shards with the original
// initialization seed.
TrainingState retrain_oracle(const ModelSpec& spec, std::vector<ClientState> retained, const FederationConfig& cfg,
                             std::uint64_t seed);

// Flat parameter checkpoint ("FUPV").
void save_params(const std::filesystem::path& path, const ParamVector& w);
ParamVector load_params(const std::filesystem::path& path);

}  // namespace afu
