#include "afu/data_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "afu/errors.hpp"
#include "binary_io.hpp"

namespace afu {

namespace {

constexpr std::uint32_t kDatasetVersion = 1;

struct Point {
  double r, c;
};

double segment_distance(Point p, Point a, Point b) {
  const double vr = b.r - a.r, vc = b.c - a.c;
  const double len2 = vr * vr + vc * vc;
  double t = len2 > 0 ? ((p.r - a.r) * vr + (p.c - a.c) * vc) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dr = p.r - (a.r + t * vr), dc = p.c - (a.c + t * vc);
  return std::sqrt(dr * dr + dc * dc);
}

// Distance from p to the class pattern centred at `centre` with arm length `arm`.
double pattern_distance(int kind, Point p, Point centre, double arm) {
  const Point l{centre.r, centre.c - arm}, r{centre.r, centre.c + arm};
  const Point t{centre.r - arm, centre.c}, b{centre.r + arm, centre.c};
  const Point tl{centre.r - arm, centre.c - arm}, br{centre.r + arm, centre.c + arm};
  const Point tr{centre.r - arm, centre.c + arm}, bl{centre.r + arm, centre.c - arm};
  switch (kind) {
    case 0:
      return segment_distance(p, l, r);
    case 1:
      return segment_distance(p, t, b);
    case 2:
      return segment_distance(p, tl, br);
    case 3:
      return segment_distance(p, tr, bl);
    case 4: {
      const double d = std::hypot(p.r - centre.r, p.c - centre.c);
      return std::abs(d - 0.75 * arm);
    }
    default:
      return std::min(segment_distance(p, l, r), segment_distance(p, t, b));
  }
}

constexpr int kPatternKinds = 6;

}  // namespace

void TriggerSpec::validate(const InputShape& shape, int num_classes) const {
  if (patch.rows() <= 0 || patch.cols() <= 0) throw ConfigError("trigger patch must be non-empty");
  if (row < 0 || col < 0 || row + patch.rows() > shape.height || col + patch.cols() > shape.width) {
    throw ConfigError("trigger patch does not fit inside the image");
  }
  if (target_class < 0 || target_class >= num_classes) throw ConfigError("trigger target_class out of range");
  if (!(poison_rate > 0.0 && poison_rate <= 1.0)) throw ConfigError("poison_rate must be in (0, 1]");
}

void AugmentSpec::validate(const InputShape& shape) const {
  if (!(noise_stddev >= 0.0)) throw ConfigError("augment noise_stddev must be >= 0");
  if (block_size < 0 || block_size > shape.height || block_size > shape.width) {
    throw ConfigError("augment block_size must fit inside the image");
  }
  if (!(block_intensity >= 0.0 && block_intensity <= 1.0)) throw ConfigError("augment block_intensity must be in [0, 1]");
  if (!(patch_probability >= 0.0 && patch_probability <= 1.0)) {
    throw ConfigError("augment patch_probability must be in [0, 1]");
  }
}

DatasetShard generate_synthetic(int num_classes, int per_class, std::uint64_t seed, InputShape shape,
                                double pixel_noise) {
  if (num_classes < 2) throw ConfigError("generate_synthetic: num_classes must be >= 2");
  if (per_class < 1) throw ConfigError("generate_synthetic: per_class must be >= 1");
  if (!(pixel_noise >= 0.0)) throw ConfigError("generate_synthetic: pixel_noise must be >= 0");

  DatasetShard out;
  out.shape = shape;
  out.num_classes = num_classes;
  out.samples.reserve(static_cast<std::size_t>(num_classes) * per_class);

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> jitter(-1, 1);
  std::uniform_real_distribution<double> amplitude(0.7, 1.0);
  std::uniform_real_distribution<double> blur(0.9, 1.3);
  std::normal_distribution<double> noise(0.0, pixel_noise > 0.0 ? pixel_noise : 1.0);

  const double scale = shape.height / 16.0;
  const double arm = 3.0 * scale;
  for (int c = 0; c < num_classes; ++c) {
    const int kind = c % kPatternKinds;
    // Classes beyond the basic pattern set reuse a pattern at a shifted centre.
    const double shift = static_cast<double>((c / kPatternKinds) % 3 - 1) * 2.0 * scale;
    for (int i = 0; i < per_class; ++i) {
      const Point centre{shape.height / 2.0 + shift + jitter(rng) * scale, shape.width / 2.0 - shift + jitter(rng) * scale};
      const double amp = amplitude(rng);
      const double sigma = blur(rng) * scale;
      Sample s;
      s.label = c;
      s.pixels.resize(shape.size());
      for (int ch = 0; ch < shape.channels; ++ch) {
        for (int y = 0; y < shape.height; ++y) {
          for (int x = 0; x < shape.width; ++x) {
            const double d = pattern_distance(kind, {y + 0.5, x + 0.5}, centre, arm);
            const double v = amp * std::exp(-d * d / (2.0 * sigma * sigma)) + (pixel_noise > 0.0 ? noise(rng) : 0.0);
            s.pixels[(ch * shape.height + y) * shape.width + x] = std::clamp(v, 0.0, 1.0);
          }
        }
      }
      out.samples.push_back(std::move(s));
    }
  }
  return out;
}

TrainTestSplit split_train_test(const DatasetShard& data, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw ConfigError("test_fraction must be in (0, 1)");
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(data.num_classes));
  for (std::size_t i = 0; i < data.samples.size(); ++i) by_class[data.samples[i].label].push_back(i);

  std::mt19937_64 rng(seed);
  DatasetShard test{-1, data.shape, data.num_classes, {}}, train{-1, data.shape, data.num_classes, {}};
  for (auto& idx : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(idx.size())));
    for (std::size_t k = 0; k < idx.size(); ++k) {
      (k < n_test ? test : train).samples.push_back(data.samples[idx[k]]);
    }
  }
  return {std::move(train), std::move(test)};
}

std::vector<DatasetShard> dirichlet_partition(const DatasetShard& data, int n_clients, double alpha,
                                              std::uint64_t seed, int max_retries) {
  if (n_clients < 2) throw ConfigError("dirichlet_partition: n_clients must be >= 2");
  if (!(alpha > 0.0)) throw ConfigError("dirichlet_partition: alpha must be > 0");

  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(data.num_classes));
  for (std::size_t i = 0; i < data.samples.size(); ++i) by_class[data.samples[i].label].push_back(i);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].size() < static_cast<std::size_t>(n_clients)) {
      throw ConfigError("dirichlet_partition: class " + std::to_string(c) + " has fewer samples than clients");
    }
  }

  const auto k = static_cast<std::size_t>(n_clients);
  std::mt19937_64 rng(seed);
  std::gamma_distribution<double> gamma(alpha, 1.0);

  for (int attempt = 0; attempt < max_retries; ++attempt) {
    std::vector<std::vector<std::size_t>> assignment(k);
    for (auto idx : by_class) {
      std::shuffle(idx.begin(), idx.end(), rng);
      std::vector<double> p(k);
      double total = 0;
      while (total <= 0.0) {
        for (auto& v : p) v = gamma(rng);
        total = std::accumulate(p.begin(), p.end(), 0.0);
      }
      const auto n = static_cast<double>(idx.size());
      std::vector<std::size_t> counts(k);
      std::vector<double> remainder(k);
      std::size_t assigned = 0;
      for (std::size_t j = 0; j < k; ++j) {
        const double exact = p[j] / total * n;
        counts[j] = static_cast<std::size_t>(std::floor(exact));
        remainder[j] = exact - static_cast<double>(counts[j]);
        assigned += counts[j];
      }
      std::vector<std::size_t> order(k);
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
      for (std::size_t r = 0; assigned < idx.size(); ++r, ++assigned) ++counts[order[r % k]];

      std::size_t pos = 0;
      for (std::size_t j = 0; j < k; ++j) {
        for (std::size_t m = 0; m < counts[j]; ++m) assignment[j].push_back(idx[pos++]);
      }
    }
    if (std::any_of(assignment.begin(), assignment.end(), [](const auto& a) { return a.empty(); })) continue;

    std::vector<DatasetShard> shards(k);
    for (std::size_t j = 0; j < k; ++j) {
      shards[j].owner = static_cast<int>(j);
      shards[j].shape = data.shape;
      shards[j].num_classes = data.num_classes;
      shards[j].samples.reserve(assignment[j].size());
      for (std::size_t i : assignment[j]) shards[j].samples.push_back(data.samples[i]);
    }
    return shards;
  }
  throw PartitionError("dirichlet_partition: could not give every client a sample after " +
                       std::to_string(max_retries) + " draws (alpha=" + std::to_string(alpha) + ")");
}

void apply_patch(Sample& sample, const TriggerSpec& trigger, const InputShape& shape) {
  for (int ch = 0; ch < shape.channels; ++ch) {
    for (Eigen::Index r = 0; r < trigger.patch.rows(); ++r) {
      for (Eigen::Index c = 0; c < trigger.patch.cols(); ++c) {
        const auto idx = (ch * shape.height + trigger.row + r) * shape.width + trigger.col + c;
        sample.pixels[idx] = std::clamp(trigger.patch(r, c), 0.0, 1.0);
      }
    }
  }
}

bool has_patch(const Sample& sample, const TriggerSpec& trigger, const InputShape& shape) {
  for (int ch = 0; ch < shape.channels; ++ch) {
    for (Eigen::Index r = 0; r < trigger.patch.rows(); ++r) {
      for (Eigen::Index c = 0; c < trigger.patch.cols(); ++c) {
        const auto idx = (ch * shape.height + trigger.row + r) * shape.width + trigger.col + c;
        if (sample.pixels[idx] != std::clamp(trigger.patch(r, c), 0.0, 1.0)) return false;
      }
    }
  }
  return true;
}

PoisonedData inject_backdoor(const DatasetShard& shard, const DatasetShard& clean_test, const TriggerSpec& trigger,
                             std::uint64_t seed) {
  trigger.validate(shard.shape, shard.num_classes);
  PoisonedData out{shard, clean_test};

  std::vector<std::size_t> order(shard.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto count = static_cast<std::size_t>(std::floor(trigger.poison_rate * static_cast<double>(shard.size())));
  for (std::size_t k = 0; k < count; ++k) {
    Sample& s = out.poisoned_shard.samples[order[k]];
    apply_patch(s, trigger, shard.shape);
    s.label = trigger.target_class;
    s.poisoned = true;
  }
  for (Sample& s : out.poisoned_testset.samples) {
    apply_patch(s, trigger, clean_test.shape);
    s.label = trigger.target_class;
    s.poisoned = true;
  }
  return out;
}

Sample augment(const Sample& x, const AugmentSpec& spec, std::uint64_t seed, const InputShape& shape,
               const TriggerSpec* trigger) {
  Sample out = x;
  if (spec.is_identity()) return out;
  std::mt19937_64 rng(seed);
  if (spec.noise_stddev > 0.0) {
    std::normal_distribution<double> noise(0.0, spec.noise_stddev);
    for (Eigen::Index i = 0; i < out.pixels.size(); ++i) out.pixels[i] += noise(rng);
  }
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (trigger != nullptr && spec.patch_probability > 0.0 && coin(rng) < spec.patch_probability) {
    apply_patch(out, *trigger, shape);
  } else if (spec.block_size > 0) {
    std::uniform_int_distribution<int> row(0, shape.height - spec.block_size);
    std::uniform_int_distribution<int> col(0, shape.width - spec.block_size);
    const int r0 = row(rng), c0 = col(rng);
    for (int ch = 0; ch < shape.channels; ++ch) {
      for (int r = r0; r < r0 + spec.block_size; ++r) {
        for (int c = c0; c < c0 + spec.block_size; ++c) {
          out.pixels[(ch * shape.height + r) * shape.width + c] = spec.block_intensity;
        }
      }
    }
  }
  out.pixels = out.pixels.cwiseMax(0.0).cwiseMin(1.0);
  return out;
}

Batch<double> make_batch(const DatasetShard& data, std::span<const std::size_t> indices) {
  Batch<double> batch;
  batch.inputs.resize(static_cast<Eigen::Index>(indices.size()), data.shape.size());
  batch.labels.resize(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const Sample& s = data.samples[indices[r]];
    batch.inputs.row(static_cast<Eigen::Index>(r)) = s.pixels.transpose();
    batch.labels[r] = s.label;
  }
  return batch;
}

Batch<double> make_batch(const DatasetShard& data) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  return make_batch(data, all);
}

std::vector<int> class_histogram(const DatasetShard& data) {
  std::vector<int> h(static_cast<std::size_t>(data.num_classes), 0);
  for (const Sample& s : data.samples) ++h[static_cast<std::size_t>(s.label)];
  return h;
}

void save_dataset(const std::filesystem::path& path, const DatasetShard& data) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot write dataset file " + path.string());
  binary::write_magic(os, "FUSD");
  binary::write_le<std::uint32_t>(os, kDatasetVersion);
  binary::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(data.size()));
  binary::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(data.shape.channels));
  binary::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(data.shape.height));
  binary::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(data.shape.width));
  binary::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(data.num_classes));
  for (const Sample& s : data.samples) {
    binary::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.label));
    binary::write_le<std::uint8_t>(os, s.poisoned ? 1 : 0);
    for (Eigen::Index i = 0; i < s.pixels.size(); ++i) binary::write_le<double>(os, s.pixels[i]);
  }
}

DatasetShard load_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open dataset file " + path.string());
  binary::expect_magic(is, "FUSD");
  const auto version = binary::read_le<std::uint32_t>(is);
  if (version != kDatasetVersion) throw ConfigError("unsupported dataset version " + std::to_string(version));
  DatasetShard data;
  const auto n = binary::read_le<std::uint32_t>(is);
  data.shape.channels = static_cast<int>(binary::read_le<std::uint32_t>(is));
  data.shape.height = static_cast<int>(binary::read_le<std::uint32_t>(is));
  data.shape.width = static_cast<int>(binary::read_le<std::uint32_t>(is));
  data.num_classes = static_cast<int>(binary::read_le<std::uint32_t>(is));
  data.samples.resize(n);
  for (Sample& s : data.samples) {
    s.label = static_cast<int>(binary::read_le<std::uint32_t>(is));
    s.poisoned = binary::read_le<std::uint8_t>(is) != 0;
    s.pixels.resize(data.shape.size());
    for (Eigen::Index i = 0; i < s.pixels.size(); ++i) s.pixels[i] = binary::read_le<double>(is);
    if (s.label < 0 || s.label >= data.num_classes) throw ConfigError("dataset label out of range");
  }
  return data;
}

}  // namespace afu
