#include "afu/tensor_nn.hpp"

#include <random>
#include <sstream>

namespace afu {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

}  // namespace

ModelSpec::ModelSpec(InputShape input, std::vector<LayerDesc> layers, int num_classes)
    : input_(input), layers_(std::move(layers)), num_classes_(num_classes) {
  if (input_.channels <= 0 || input_.height <= 0 || input_.width <= 0) {
    throw ConfigError("input shape must be positive");
  }
  if (num_classes_ < 2) throw ConfigError("num_classes must be >= 2");
  if (layers_.empty()) throw ConfigError("model needs at least one layer");

  InputShape shape = input_;
  Eigen::Index offset = 0;
  for (const LayerDesc& desc : layers_) {
    LayerPlan l;
    l.in = shape;
    l.offset = offset;
    std::visit(overloaded{
                   [&](const layer::Dense& d) {
                     if (d.out <= 0) throw ConfigError("dense layer width must be positive");
                     l.kind = LayerKind::Dense;
                     l.in = {shape.size(), 1, 1};
                     l.out = {d.out, 1, 1};
                     l.weight_count = static_cast<Eigen::Index>(d.out) * shape.size();
                     l.bias_count = d.out;
                   },
                   [&](const layer::Conv& c) {
                     if (c.out_channels <= 0 || c.kernel <= 0 || c.stride <= 0 || c.padding < 0) {
                       throw ConfigError("conv layer parameters must be positive");
                     }
                     const int ho = (shape.height + 2 * c.padding - c.kernel) / c.stride + 1;
                     const int wo = (shape.width + 2 * c.padding - c.kernel) / c.stride + 1;
                     if (ho <= 0 || wo <= 0) throw ConfigError("conv layer shrinks the input to nothing");
                     l.kind = LayerKind::Conv;
                     l.kernel = c.kernel;
                     l.stride = c.stride;
                     l.padding = c.padding;
                     l.out = {c.out_channels, ho, wo};
                     l.weight_count = static_cast<Eigen::Index>(c.out_channels) * shape.channels * c.kernel * c.kernel;
                     l.bias_count = c.out_channels;
                   },
                   [&](const layer::Relu&) {
                     l.kind = LayerKind::Relu;
                     l.out = shape;
                   },
               },
               desc);
    offset += l.weight_count + l.bias_count;
    shape = l.out;
    plan_.push_back(l);
  }
  if (shape.size() != num_classes_) {
    throw ConfigError("final layer produces " + std::to_string(shape.size()) + " outputs, expected " +
                      std::to_string(num_classes_));
  }
  param_count_ = offset;
}

ModelSpec ModelSpec::dense(int num_classes, InputShape input, const std::vector<int>& hidden) {
  std::vector<LayerDesc> layers;
  for (int width : hidden) {
    layers.emplace_back(layer::Dense{width});
    layers.emplace_back(layer::Relu{});
  }
  layers.emplace_back(layer::Dense{num_classes});
  return ModelSpec(input, std::move(layers), num_classes);
}

ModelSpec ModelSpec::conv(int num_classes, InputShape input) {
  std::vector<LayerDesc> layers;
  for (int channels : {8, 16, 16, 16}) {
    layers.emplace_back(layer::Conv{channels, 3, 2, 1});
    layers.emplace_back(layer::Relu{});
  }
  layers.emplace_back(layer::Dense{32});
  layers.emplace_back(layer::Relu{});
  layers.emplace_back(layer::Dense{num_classes});
  return ModelSpec(input, std::move(layers), num_classes);
}

std::string ModelSpec::describe() const {
  std::ostringstream os;
  os << input_.channels << "x" << input_.height << "x" << input_.width;
  for (const LayerPlan& l : plan_) {
    switch (l.kind) {
      case LayerKind::Dense:
        os << " -> dense(" << l.out.size() << ")";
        break;
      case LayerKind::Conv:
        os << " -> conv" << l.kernel << "s" << l.stride << "(" << l.out.channels << "x" << l.out.height << "x"
           << l.out.width << ")";
        break;
      case LayerKind::Relu:
        os << " -> relu";
        break;
    }
  }
  os << " [" << param_count_ << " params]";
  return os.str();
}

ParamVector initialize_params(const ModelSpec& spec, std::uint64_t seed) {
  ParamVector params = ParamVector::Zero(spec.param_count());
  std::mt19937_64 rng(seed);
  for (const LayerPlan& l : spec.plan()) {
    double fan_in = 0, fan_out = 0;
    if (l.kind == LayerKind::Dense) {
      fan_in = l.in.size();
      fan_out = l.out.size();
    } else if (l.kind == LayerKind::Conv) {
      fan_in = static_cast<double>(l.in.channels) * l.kernel * l.kernel;
      fan_out = static_cast<double>(l.out.channels) * l.kernel * l.kernel;
    } else {
      continue;
    }
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (Eigen::Index i = 0; i < l.weight_count; ++i) params[l.offset + i] = dist(rng);
  }
  return params;
}

}  // namespace afu
