#pragma once

// Experiment configuration as flat INI text.
//
//   # comment            ; comment
//   [section]
//   key = value
//
// Sections: data, model, federation, unlearn, trigger, augment, experiment.
// Lists are comma separated. Unknown sections and keys are rejected. Keys not
// present keep their defaults; serialize_config writes every key, so its
// output re-parses to the same configuration.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "afu/data_pipeline.hpp"
#include "afu/federation.hpp"
#include "afu/tensor_nn.hpp"
#include "afu/unlearning.hpp"

namespace afu {

enum class Method { Retrain, Pga, AfuIc };

const char* to_string(Method m);
Method parse_method(const std::string& text);

struct DataConfig {
  int num_classes = 3;
  int per_class = 400;
  double test_fraction = 0.25;
  double pixel_noise = kDefaultPixelNoise;
};

struct ModelConfig {
  std::string arch = "dense";  // dense | conv
  std::vector<int> hidden = {64};

  ModelSpec build(int num_classes) const;
};

inline constexpr int kLargestShard = -1;

// Scenario defaults. The ascent radius and calibration settings were tuned once
// on the default synthetic scenario; the core structs keep their own defaults.
UnlearnConfig default_unlearn_config();
AugmentSpec default_augment_spec();

struct ExperimentConfig {
  DataConfig data;
  ModelConfig model;
  FederationConfig federation;
  UnlearnConfig unlearn = default_unlearn_config();
  TriggerSpec trigger;
  AugmentSpec augment = default_augment_spec();
  int target = kLargestShard;  // client id, or the largest shard (lowest id on ties)
  double min_backdoor_accuracy = 80.0;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::vector<Method> methods = {Method::Retrain, Method::Pga, Method::AfuIc};
  std::filesystem::path output_dir = "afu_out";

  void validate() const;
  bool has_method(Method m) const;
};

ExperimentConfig parse_config_text(const std::string& text, const std::string& origin = "<config>");
ExperimentConfig parse_config(const std::filesystem::path& path);

// Sets "section.key" to value as if it appeared in a file.
void set_config_value(ExperimentConfig& cfg, const std::string& dotted_key, const std::string& value);

std::string serialize_config(const ExperimentConfig& cfg);

}  // namespace afu
