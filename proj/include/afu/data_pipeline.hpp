#pragma once

// Synthetic image data, Dirichlet label-skew partitioning, backdoor injection
// and the augmentation transform used by server calibration.

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "afu/tensor_nn.hpp"

namespace afu {

struct Sample {
  Eigen::VectorXd pixels;  // C*H*W in CHW order, values in [0, 1]
  int label = 0;
  bool poisoned = false;
};

struct DatasetShard {
  int owner = -1;
  InputShape shape;
  int num_classes = 0;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

struct TriggerSpec {
  Eigen::MatrixXd patch = Eigen::MatrixXd::Ones(3, 3);
  int row = 0;
  int col = 0;
  int target_class = 0;
  double poison_rate = 0.5;

  void validate(const InputShape& shape, int num_classes) const;
};

// Gaussian pixel noise plus one constant block at a random position.
struct AugmentSpec {
  double noise_stddev = 0.1;
  int block_size = 4;
  double block_intensity = 1.0;
  // Probability of stamping the trigger patch instead of a random block.
  // Experimental; needs the trigger passed to augment().
  double patch_probability = 0.0;

  bool is_identity() const { return noise_stddev == 0.0 && block_size == 0 && patch_probability == 0.0; }
  void validate(const InputShape& shape) const;
};

inline constexpr double kDefaultPixelNoise = 0.35;

// Each class is a blurred line/ring pattern in the image centre; samples add
// jitter, amplitude variation and N(0, pixel_noise) pixel noise before
// clamping. Classes are emitted in order.
DatasetShard generate_synthetic(int num_classes, int per_class, std::uint64_t seed, InputShape shape = {},
                                double pixel_noise = kDefaultPixelNoise);

struct TrainTestSplit {
  DatasetShard train;
  DatasetShard test;
};

// Per-class split; test receives round(test_fraction * n_c) samples of each class.
TrainTestSplit split_train_test(const DatasetShard& data, double test_fraction, std::uint64_t seed);

// Per-class proportions p ~ Dir(alpha) over clients, largest-remainder rounding.
std::vector<DatasetShard> dirichlet_partition(const DatasetShard& data, int n_clients, double alpha,
                                              std::uint64_t seed, int max_retries = 1000);

struct PoisonedData {
  DatasetShard poisoned_shard;
  DatasetShard poisoned_testset;
};

// floor(poison_rate * n) samples of shard get the patch and the target label.
// Every sample of clean_test is patched and relabelled for backdoor evaluation.
PoisonedData inject_backdoor(const DatasetShard& shard, const DatasetShard& clean_test, const TriggerSpec& trigger,
                             std::uint64_t seed);

void apply_patch(Sample& sample, const TriggerSpec& trigger, const InputShape& shape);
bool has_patch(const Sample& sample, const TriggerSpec& trigger, const InputShape& shape);

Sample augment(const Sample& x, const AugmentSpec& spec, std::uint64_t seed, const InputShape& shape,
               const TriggerSpec* trigger = nullptr);

Batch<double> make_batch(const DatasetShard& data, std::span<const std::size_t> indices);
Batch<double> make_batch(const DatasetShard& data);

std::vector<int> class_histogram(const DatasetShard& data);

// Flat binary fixture format ("FUSD").
void save_dataset(const std::filesystem::path& path, const DatasetShard& data);
DatasetShard load_dataset(const std::filesystem::path& path);

}  // namespace afu
