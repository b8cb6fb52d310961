#include "afu/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <type_traits>

#include "afu/errors.hpp"

namespace afu {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return "";
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double to_double(const std::string& text) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) throw ConfigError("expected a number, got '" + text + "'");
  return v;
}

long long to_integer(const std::string& text) {
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ConfigError("expected an integer, got '" + text + "'");
  }
  return v;
}

int to_int(const std::string& text) { return static_cast<int>(to_integer(text)); }

std::string fmt(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

template <typename T, typename F>
std::string join(const std::vector<T>& items, F&& each) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ", ";
    out += each(items[i]);
  }
  return out;
}

// "0-4" expands to 0,1,2,3,4.
std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  for (const std::string& item : split_list(text)) {
    const auto dash = item.find('-', 1);
    if (dash == std::string::npos) {
      const long long v = to_integer(item);
      if (v < 0) throw ConfigError("seeds must be non-negative");
      seeds.push_back(static_cast<std::uint64_t>(v));
      continue;
    }
    const long long lo = to_integer(trim(item.substr(0, dash))), hi = to_integer(trim(item.substr(dash + 1)));
    if (lo < 0 || hi < lo) throw ConfigError("bad seed range '" + item + "'");
    for (long long s = lo; s <= hi; ++s) seeds.push_back(static_cast<std::uint64_t>(s));
  }
  return seeds;
}

struct Field {
  const char* section;
  const char* key;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

#define AFU_NUM(sec, name, member)                                                                    \
  Field {                                                                                             \
    sec, name, [](const ExperimentConfig& c) { return fmt(static_cast<double>(c.member)); },          \
        [](ExperimentConfig& c, const std::string& v) { c.member = static_cast<decltype(c.member)>(  \
                                                             std::is_integral_v<decltype(c.member)>   \
                                                                 ? static_cast<double>(to_integer(v)) \
                                                                 : to_double(v)); }                   \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      AFU_NUM("data", "num_classes", data.num_classes),
      AFU_NUM("data", "per_class", data.per_class),
      AFU_NUM("data", "test_fraction", data.test_fraction),
      AFU_NUM("data", "pixel_noise", data.pixel_noise),

      {"model", "arch", [](const ExperimentConfig& c) { return c.model.arch; },
       [](ExperimentConfig& c, const std::string& v) {
         if (v != "dense" && v != "conv") throw ConfigError("model.arch must be 'dense' or 'conv', got '" + v + "'");
         c.model.arch = v;
       }},
      {"model", "hidden",
       [](const ExperimentConfig& c) { return join(c.model.hidden, [](int h) { return std::to_string(h); }); },
       [](ExperimentConfig& c, const std::string& v) {
         c.model.hidden.clear();
         for (const std::string& h : split_list(v)) c.model.hidden.push_back(to_int(h));
       }},

      AFU_NUM("federation", "n_clients", federation.n_clients),
      AFU_NUM("federation", "alpha", federation.alpha),
      AFU_NUM("federation", "rounds", federation.rounds),
      AFU_NUM("federation", "local_epochs", federation.local_epochs),
      AFU_NUM("federation", "batch_size", federation.batch_size),
      AFU_NUM("federation", "lr", federation.lr),
      {"federation", "mode", [](const ExperimentConfig& c) { return std::string(to_string(c.federation.mode)); },
       [](ExperimentConfig& c, const std::string& v) { c.federation.mode = parse_sync_mode(v); }},
      AFU_NUM("federation", "post_rounds", federation.post_rounds),
      {"federation", "speed_factors",
       [](const ExperimentConfig& c) { return join(c.federation.speed_factors, [](double s) { return fmt(s); }); },
       [](ExperimentConfig& c, const std::string& v) {
         c.federation.speed_factors.clear();
         for (const std::string& s : split_list(v)) c.federation.speed_factors.push_back(to_double(s));
       }},
      {"federation", "target",
       [](const ExperimentConfig& c) { return c.target == kLargestShard ? std::string("largest") : std::to_string(c.target); },
       [](ExperimentConfig& c, const std::string& v) { c.target = v == "largest" ? kLargestShard : to_int(v); }},
      AFU_NUM("federation", "unit_cost_s", federation.cost.unit_cost_s),
      AFU_NUM("federation", "comm_latency_s", federation.cost.comm_latency_s),
      AFU_NUM("federation", "server_speed", federation.cost.server_speed),

      AFU_NUM("unlearn", "eta_asc", unlearn.eta_asc),
      AFU_NUM("unlearn", "eta_calib", unlearn.eta_calib),
      {"unlearn", "delta", [](const ExperimentConfig& c) { return c.unlearn.delta ? fmt(*c.unlearn.delta) : "auto"; },
       [](ExperimentConfig& c, const std::string& v) {
         if (v == "auto") c.unlearn.delta.reset();
         else c.unlearn.delta = to_double(v);
       }},
      AFU_NUM("unlearn", "delta_scale", unlearn.delta_scale),
      AFU_NUM("unlearn", "t_asc", unlearn.t_asc),
      AFU_NUM("unlearn", "t_calib", unlearn.t_calib),
      AFU_NUM("unlearn", "gamma_calib", unlearn.gamma_calib),
      {"unlearn", "early_stop_acc",
       [](const ExperimentConfig& c) { return c.unlearn.early_stop_acc ? fmt(*c.unlearn.early_stop_acc) : "auto"; },
       [](ExperimentConfig& c, const std::string& v) {
         if (v == "auto") c.unlearn.early_stop_acc.reset();
         else c.unlearn.early_stop_acc = to_double(v);
       }},
      AFU_NUM("unlearn", "batch_size", unlearn.batch_size),
      AFU_NUM("unlearn", "calib_batch_size", unlearn.calib_batch_size),
      AFU_NUM("unlearn", "calib_samples", unlearn.calib_samples),
      {"unlearn", "ascent_optimizer",
       [](const ExperimentConfig& c) { return std::string(to_string(c.unlearn.ascent_optimizer)); },
       [](ExperimentConfig& c, const std::string& v) { c.unlearn.ascent_optimizer = parse_optimizer_kind(v); }},
      {"unlearn", "calib_optimizer",
       [](const ExperimentConfig& c) { return std::string(to_string(c.unlearn.calib_optimizer)); },
       [](ExperimentConfig& c, const std::string& v) { c.unlearn.calib_optimizer = parse_optimizer_kind(v); }},
      {"unlearn", "weight_basis",
       [](const ExperimentConfig& c) { return std::string(to_string(c.unlearn.weight_basis)); },
       [](ExperimentConfig& c, const std::string& v) { c.unlearn.weight_basis = parse_weight_basis(v); }},

      {"trigger", "size", [](const ExperimentConfig& c) { return std::to_string(c.trigger.patch.rows()); },
       [](ExperimentConfig& c, const std::string& v) {
         const int n = to_int(v);
         if (n < 1) throw ConfigError("trigger.size must be >= 1");
         const double value = c.trigger.patch.size() ? c.trigger.patch(0, 0) : 1.0;
         c.trigger.patch = Eigen::MatrixXd::Constant(n, n, value);
       }},
      {"trigger", "value", [](const ExperimentConfig& c) { return fmt(c.trigger.patch(0, 0)); },
       [](ExperimentConfig& c, const std::string& v) {
         const double value = to_double(v);
         if (!(value >= 0.0 && value <= 1.0)) throw ConfigError("trigger.value must be in [0, 1]");
         c.trigger.patch.setConstant(value);
       }},
      AFU_NUM("trigger", "row", trigger.row),
      AFU_NUM("trigger", "col", trigger.col),
      AFU_NUM("trigger", "target_class", trigger.target_class),
      AFU_NUM("trigger", "poison_rate", trigger.poison_rate),

      AFU_NUM("augment", "noise_stddev", augment.noise_stddev),
      AFU_NUM("augment", "block_size", augment.block_size),
      AFU_NUM("augment", "block_intensity", augment.block_intensity),
      AFU_NUM("augment", "patch_probability", augment.patch_probability),

      {"experiment", "seeds",
       [](const ExperimentConfig& c) { return join(c.seeds, [](std::uint64_t s) { return std::to_string(s); }); },
       [](ExperimentConfig& c, const std::string& v) { c.seeds = parse_seeds(v); }},
      {"experiment", "methods",
       [](const ExperimentConfig& c) { return join(c.methods, [](Method m) { return std::string(to_string(m)); }); },
       [](ExperimentConfig& c, const std::string& v) {
         c.methods.clear();
         for (const std::string& m : split_list(v)) {
           const Method parsed = parse_method(m);
           if (std::find(c.methods.begin(), c.methods.end(), parsed) == c.methods.end()) c.methods.push_back(parsed);
         }
       }},
      {"experiment", "output_dir", [](const ExperimentConfig& c) { return c.output_dir.string(); },
       [](ExperimentConfig& c, const std::string& v) { c.output_dir = v; }},
      AFU_NUM("experiment", "min_backdoor_accuracy", min_backdoor_accuracy),
  };
  return table;
}

#undef AFU_NUM

const Field* find_field(const std::string& section, const std::string& key) {
  for (const Field& f : fields()) {
    if (section == f.section && key == f.key) return &f;
  }
  return nullptr;
}

bool known_section(const std::string& section) {
  for (const Field& f : fields()) {
    if (section == f.section) return true;
  }
  return false;
}

}  // namespace

UnlearnConfig default_unlearn_config() {
  UnlearnConfig u;
  u.delta_scale = 0.5;
  u.eta_calib = 0.05;
  u.t_calib = 10;
  u.calib_optimizer = OptimizerKind::Sgd;
  return u;
}

// Trigger-shaped occlusion only; the Gaussian term acts as a weight shrinker
// and pulls the model away from the oracle.
AugmentSpec default_augment_spec() {
  AugmentSpec a;
  a.noise_stddev = 0.0;
  a.patch_probability = 1.0;
  return a;
}

const char* to_string(Method m) {
  switch (m) {
    case Method::Retrain:
      return "retrain";
    case Method::Pga:
      return "pga";
    case Method::AfuIc:
      return "afu_ic";
  }
  return "?";
}

Method parse_method(const std::string& text) {
  if (text == "retrain") return Method::Retrain;
  if (text == "pga") return Method::Pga;
  if (text == "afu_ic") return Method::AfuIc;
  throw ConfigError("method must be one of retrain, pga, afu_ic; got '" + text + "'");
}

ModelSpec ModelConfig::build(int num_classes) const {
  if (arch == "conv") return ModelSpec::conv(num_classes);
  for (int h : hidden) {
    if (h < 1) throw ConfigError("model.hidden sizes must be >= 1");
  }
  return ModelSpec::dense(num_classes, {}, hidden);
}

bool ExperimentConfig::has_method(Method m) const {
  return std::find(methods.begin(), methods.end(), m) != methods.end();
}

void ExperimentConfig::validate() const {
  if (data.num_classes < 2) throw ConfigError("data.num_classes must be >= 2");
  if (data.per_class < 1) throw ConfigError("data.per_class must be >= 1");
  if (!(data.test_fraction > 0.0 && data.test_fraction < 1.0)) throw ConfigError("data.test_fraction must be in (0, 1)");
  if (!(data.pixel_noise >= 0.0)) throw ConfigError("data.pixel_noise must be >= 0");
  federation.validate();
  if (federation.rounds < 1) throw ConfigError("federation.rounds must be >= 1");
  if (target != kLargestShard && (target < 0 || target >= federation.n_clients)) {
    throw ConfigError("federation.target must be 'largest' or a client id below n_clients");
  }
  unlearn.validate();
  const InputShape shape{};
  trigger.validate(shape, data.num_classes);
  augment.validate(shape);
  if (!(min_backdoor_accuracy >= 0.0 && min_backdoor_accuracy <= 100.0)) {
    throw ConfigError("experiment.min_backdoor_accuracy must be in [0, 100]");
  }
  if (seeds.empty()) throw ConfigError("experiment.seeds must not be empty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
    throw ConfigError("experiment.seeds must not repeat");
  }
  if (methods.empty()) throw ConfigError("experiment.methods must not be empty");
  if (output_dir.empty()) throw ConfigError("experiment.output_dir must not be empty");
  model.build(data.num_classes);
}

void set_config_value(ExperimentConfig& cfg, const std::string& dotted_key, const std::string& value) {
  const auto dot = dotted_key.find('.');
  if (dot == std::string::npos) throw ConfigError("expected section.key, got '" + dotted_key + "'");
  const std::string section = dotted_key.substr(0, dot), key = dotted_key.substr(dot + 1);
  const Field* f = find_field(section, key);
  if (f == nullptr) throw ConfigError("unknown key '" + key + "' in [" + section + "]");
  try {
    f->set(cfg, trim(value));
  } catch (const ConfigError& e) {
    throw ConfigError(section + "." + key + ": " + e.what());
  }
}

ExperimentConfig parse_config_text(const std::string& text, const std::string& origin) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string raw, section;
  std::set<std::string> seen;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string where = origin + ":" + std::to_string(line_no) + ": ";
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      if (!known_section(section)) throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected key = value");
    if (section.empty()) throw ConfigError(where + "key outside of any section");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!seen.insert(section + "." + key).second) {
      throw ConfigError(where + "duplicate key '" + key + "' in [" + section + "]");
    }
    try {
      set_config_value(cfg, section + "." + key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return cfg;
}

ExperimentConfig parse_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  std::ostringstream text;
  text << is.rdbuf();
  return parse_config_text(text.str(), path.string());
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::string out, section;
  for (const Field& f : fields()) {
    if (section != f.section) {
      if (!section.empty()) out += '\n';
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += std::string(f.key) + " = " + f.get(cfg) + "\n";
  }
  return out;
}

}  // namespace afu
