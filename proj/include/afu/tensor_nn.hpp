#pragma once

// Dense neural-network core: parameter-vector algebra, forward and backward
// passes for small dense/conv stacks, softmax losses and first-order optimizers.
//
// All model parameters live in a single flat vector. A ModelSpec resolves the
// layer list into a plan of offsets into that vector, so aggregation, projection
// and distances operate on plain Eigen vectors.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "afu/errors.hpp"

namespace afu {

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// One sample per row; row-major so a sample's features are contiguous.
template <typename Scalar>
using SampleMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using ParamVector = VectorX<double>;

struct InputShape {
  int channels = 1;
  int height = 16;
  int width = 16;

  int size() const { return channels * height * width; }
  bool operator==(const InputShape&) const = default;
};

namespace layer {
struct Dense {
  int out = 0;
};
// Square kernel, zero padding.
struct Conv {
  int out_channels = 0;
  int kernel = 3;
  int stride = 2;
  int padding = 1;
};
struct Relu {};
}  // namespace layer

using LayerDesc = std::variant<layer::Dense, layer::Conv, layer::Relu>;

enum class LayerKind { Dense, Conv, Relu };

// A layer resolved against its input shape. Dense layers see a flat {size, 1, 1}.
struct LayerPlan {
  LayerKind kind = LayerKind::Relu;
  InputShape in;
  InputShape out;
  int kernel = 0;
  int stride = 1;
  int padding = 0;
  Eigen::Index offset = 0;
  Eigen::Index weight_count = 0;
  Eigen::Index bias_count = 0;
};

class ModelSpec {
 public:
  ModelSpec(InputShape input, std::vector<LayerDesc> layers, int num_classes);

  // input -> hidden... -> num_classes with ReLU between dense layers.
  static ModelSpec dense(int num_classes, InputShape input = {}, const std::vector<int>& hidden = {64});
  // Four stride-2 conv blocks followed by a two-layer dense head.
  static ModelSpec conv(int num_classes, InputShape input = {});

  const InputShape& input_shape() const { return input_; }
  int input_size() const { return input_.size(); }
  int num_classes() const { return num_classes_; }
  Eigen::Index param_count() const { return param_count_; }
  const std::vector<LayerDesc>& layers() const { return layers_; }
  const std::vector<LayerPlan>& plan() const { return plan_; }

  std::string describe() const;

 private:
  InputShape input_;
  std::vector<LayerDesc> layers_;
  int num_classes_;
  std::vector<LayerPlan> plan_;
  Eigen::Index param_count_ = 0;
};

// Glorot-uniform weights, zero biases.
ParamVector initialize_params(const ModelSpec& spec, std::uint64_t seed);

template <typename Scalar>
struct Batch {
  SampleMatrix<Scalar> inputs;
  std::vector<int> labels;

  Eigen::Index size() const { return inputs.rows(); }
};

template <typename Scalar>
struct ForwardTrace {
  // activations[0] is the input, activations[i + 1] the output of layer i.
  std::vector<SampleMatrix<Scalar>> activations;

  const SampleMatrix<Scalar>& logits() const { return activations.back(); }
};

namespace detail {

inline void check_shapes(const ModelSpec& spec, Eigen::Index params, Eigen::Index features) {
  if (params != spec.param_count()) {
    throw ConfigError("parameter vector has length " + std::to_string(params) + ", model expects " +
                      std::to_string(spec.param_count()));
  }
  if (features != spec.input_size()) {
    throw ConfigError("batch has " + std::to_string(features) + " features per sample, model expects " +
                      std::to_string(spec.input_size()));
  }
}

template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>>;
template <typename Scalar>
using MatrixMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>>;

template <typename Scalar>
SampleMatrix<Scalar> conv_forward(const LayerPlan& l, const Scalar* params, const SampleMatrix<Scalar>& x) {
  const int C = l.in.channels, H = l.in.height, W = l.in.width;
  const int O = l.out.channels, Ho = l.out.height, Wo = l.out.width;
  const int k = l.kernel, s = l.stride, p = l.padding;
  const Scalar* kern = params + l.offset;
  const Scalar* bias = kern + l.weight_count;
  SampleMatrix<Scalar> y(x.rows(), l.out.size());
  for (Eigen::Index b = 0; b < x.rows(); ++b) {
    const Scalar* in = x.row(b).data();
    Scalar* out = y.row(b).data();
    for (int o = 0; o < O; ++o) {
      for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
          Scalar acc = bias[o];
          for (int c = 0; c < C; ++c) {
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * s - p + ky;
              if (iy < 0 || iy >= H) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * s - p + kx;
                if (ix < 0 || ix >= W) continue;
                acc += kern[((o * C + c) * k + ky) * k + kx] * in[(c * H + iy) * W + ix];
              }
            }
          }
          out[(o * Ho + oy) * Wo + ox] = acc;
        }
      }
    }
  }
  return y;
}

// Accumulates kernel/bias gradients into grad and returns the input gradient.
template <typename Scalar>
SampleMatrix<Scalar> conv_backward(const LayerPlan& l, const Scalar* params, const SampleMatrix<Scalar>& x,
                                   const SampleMatrix<Scalar>& dy, Scalar* grad) {
  const int C = l.in.channels, H = l.in.height, W = l.in.width;
  const int O = l.out.channels, Ho = l.out.height, Wo = l.out.width;
  const int k = l.kernel, s = l.stride, p = l.padding;
  const Scalar* kern = params + l.offset;
  Scalar* gkern = grad + l.offset;
  Scalar* gbias = gkern + l.weight_count;
  SampleMatrix<Scalar> dx = SampleMatrix<Scalar>::Zero(x.rows(), x.cols());
  for (Eigen::Index b = 0; b < x.rows(); ++b) {
    const Scalar* in = x.row(b).data();
    const Scalar* dout = dy.row(b).data();
    Scalar* din = dx.row(b).data();
    for (int o = 0; o < O; ++o) {
      for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
          const Scalar g = dout[(o * Ho + oy) * Wo + ox];
          gbias[o] += g;
          for (int c = 0; c < C; ++c) {
            for (int ky = 0; ky < k; ++ky) {
              const int iy = oy * s - p + ky;
              if (iy < 0 || iy >= H) continue;
              for (int kx = 0; kx < k; ++kx) {
                const int ix = ox * s - p + kx;
                if (ix < 0 || ix >= W) continue;
                const int ki = ((o * C + c) * k + ky) * k + kx;
                const int xi = (c * H + iy) * W + ix;
                gkern[ki] += g * in[xi];
                din[xi] += g * kern[ki];
              }
            }
          }
        }
      }
    }
  }
  return dx;
}

}  // namespace detail

template <typename Scalar>
ForwardTrace<Scalar> forward_trace(const ModelSpec& spec, const VectorX<Scalar>& params,
                                   const SampleMatrix<Scalar>& inputs) {
  detail::check_shapes(spec, params.size(), inputs.cols());
  ForwardTrace<Scalar> trace;
  trace.activations.reserve(spec.plan().size() + 1);
  trace.activations.push_back(inputs);
  for (const LayerPlan& l : spec.plan()) {
    const SampleMatrix<Scalar>& x = trace.activations.back();
    SampleMatrix<Scalar> y;
    switch (l.kind) {
      case LayerKind::Dense: {
        detail::ConstMatrixMap<Scalar> w(params.data() + l.offset, l.out.size(), l.in.size());
        Eigen::Map<const VectorX<Scalar>> b(params.data() + l.offset + l.weight_count, l.bias_count);
        y.noalias() = x * w.transpose();
        y.rowwise() += b.transpose();
        break;
      }
      case LayerKind::Conv:
        y = detail::conv_forward(l, params.data(), x);
        break;
      case LayerKind::Relu:
        y = x.cwiseMax(Scalar(0));
        break;
    }
    trace.activations.push_back(std::move(y));
  }
  return trace;
}

// Logits, shape (batch, num_classes).
template <typename Scalar>
SampleMatrix<Scalar> forward(const ModelSpec& spec, const VectorX<Scalar>& params, const SampleMatrix<Scalar>& inputs) {
  return std::move(forward_trace(spec, params, inputs).activations.back());
}

// Gradient of a scalar loss w.r.t. the parameters, given dLoss/dLogits.
template <typename Scalar>
VectorX<Scalar> backward(const ModelSpec& spec, const VectorX<Scalar>& params, const ForwardTrace<Scalar>& trace,
                         SampleMatrix<Scalar> dlogits) {
  VectorX<Scalar> grad = VectorX<Scalar>::Zero(params.size());
  SampleMatrix<Scalar> dy = std::move(dlogits);
  const auto& plan = spec.plan();
  for (std::size_t i = plan.size(); i-- > 0;) {
    const LayerPlan& l = plan[i];
    const SampleMatrix<Scalar>& x = trace.activations[i];
    SampleMatrix<Scalar> dx;
    switch (l.kind) {
      case LayerKind::Dense: {
        detail::ConstMatrixMap<Scalar> w(params.data() + l.offset, l.out.size(), l.in.size());
        detail::MatrixMap<Scalar> gw(grad.data() + l.offset, l.out.size(), l.in.size());
        Eigen::Map<VectorX<Scalar>> gb(grad.data() + l.offset + l.weight_count, l.bias_count);
        gw.noalias() = dy.transpose() * x;
        gb = dy.colwise().sum().transpose();
        if (i > 0) dx.noalias() = dy * w;
        break;
      }
      case LayerKind::Conv:
        dx = detail::conv_backward(l, params.data(), x, dy, grad.data());
        break;
      case LayerKind::Relu:
        dx = (x.array() > Scalar(0)).select(dy, Scalar(0));
        break;
    }
    dy = std::move(dx);
  }
  return grad;
}

// Row-wise log-softmax with max subtraction.
template <typename Scalar>
SampleMatrix<Scalar> log_softmax_rows(const SampleMatrix<Scalar>& logits) {
  SampleMatrix<Scalar> out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const Scalar m = logits.row(r).maxCoeff();
    const Scalar lse = m + std::log((logits.row(r).array() - m).exp().sum());
    out.row(r) = logits.row(r).array() - lse;
  }
  return out;
}

template <typename Scalar>
SampleMatrix<Scalar> softmax_rows(const SampleMatrix<Scalar>& logits) {
  return log_softmax_rows(logits).array().exp().matrix();
}

enum class LossKind { CrossEntropy, KlToReference };

template <typename Scalar>
struct Loss {
  LossKind kind = LossKind::CrossEntropy;
  // KlToReference only: logits of the detached target distribution P(.|x).
  SampleMatrix<Scalar> reference_logits;

  static Loss cross_entropy() { return {}; }
  static Loss kl_to_reference(SampleMatrix<Scalar> reference) {
    return {LossKind::KlToReference, std::move(reference)};
  }
};

template <typename Scalar>
struct LossAndGrad {
  Scalar loss = 0;
  VectorX<Scalar> grad;
};

// Batch-mean loss and its exact gradient. For KlToReference the loss is
// KL(softmax(reference) || softmax(model(inputs))) and no gradient flows into
// the reference side.
template <typename Scalar>
LossAndGrad<Scalar> loss_and_grad(const ModelSpec& spec, const VectorX<Scalar>& params, const Batch<Scalar>& batch,
                                  const Loss<Scalar>& loss) {
  if (batch.inputs.rows() != static_cast<Eigen::Index>(batch.labels.size()) && loss.kind == LossKind::CrossEntropy) {
    throw ConfigError("batch has " + std::to_string(batch.inputs.rows()) + " rows but " +
                      std::to_string(batch.labels.size()) + " labels");
  }
  const ForwardTrace<Scalar> trace = forward_trace(spec, params, batch.inputs);
  const SampleMatrix<Scalar>& logits = trace.logits();
  const Eigen::Index n = logits.rows();
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(std::max<Eigen::Index>(n, 1));
  const SampleMatrix<Scalar> log_q = log_softmax_rows(logits);
  SampleMatrix<Scalar> dlogits = log_q.array().exp().matrix();

  Scalar total = 0;
  if (loss.kind == LossKind::CrossEntropy) {
    for (Eigen::Index r = 0; r < n; ++r) {
      const int y = batch.labels[static_cast<std::size_t>(r)];
      if (y < 0 || y >= spec.num_classes()) throw ConfigError("label out of range: " + std::to_string(y));
      total -= log_q(r, y);
      dlogits(r, y) -= Scalar(1);
    }
  } else {
    if (loss.reference_logits.rows() != n || loss.reference_logits.cols() != logits.cols()) {
      throw ConfigError("reference logits shape does not match model output");
    }
    const SampleMatrix<Scalar> log_p = log_softmax_rows(loss.reference_logits);
    const SampleMatrix<Scalar> p = log_p.array().exp().matrix();
    total = (p.array() * (log_p - log_q).array()).sum();
    dlogits -= p;
  }
  dlogits *= inv_n;

  LossAndGrad<Scalar> out;
  out.loss = total * inv_n;
  if (!std::isfinite(static_cast<double>(out.loss))) throw NumericalError("non-finite loss");
  out.grad = backward(spec, params, trace, std::move(dlogits));
  return out;
}

// KL(softmax(p_logits) || softmax(q_logits)).
template <typename DerivedP, typename DerivedQ>
typename DerivedP::Scalar kl_divergence(const Eigen::MatrixBase<DerivedP>& p_logits,
                                        const Eigen::MatrixBase<DerivedQ>& q_logits) {
  using Scalar = typename DerivedP::Scalar;
  if (p_logits.size() != q_logits.size() || p_logits.size() < 2) {
    throw ConfigError("kl_divergence needs two logit vectors of equal length >= 2");
  }
  SampleMatrix<Scalar> p(1, p_logits.size()), q(1, q_logits.size());
  p.row(0) = p_logits.transpose().template cast<Scalar>();
  q.row(0) = q_logits.transpose().template cast<Scalar>();
  const SampleMatrix<Scalar> log_p = log_softmax_rows(p);
  const SampleMatrix<Scalar> log_q = log_softmax_rows(q);
  const Scalar kl = (log_p.array().exp() * (log_p - log_q).array()).sum();
  return std::max(kl, Scalar(0));
}

template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar l2_distance(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b) {
  if (a.size() != b.size()) {
    throw ConfigError("l2_distance: length mismatch (" + std::to_string(a.size()) + " vs " +
                      std::to_string(b.size()) + ")");
  }
  return (a - b).norm();
}

enum class OptimizerKind { Sgd, Adam };
enum class Direction { Descent, Ascent };

template <typename Scalar>
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::Sgd;
  Scalar learning_rate = Scalar(0.01);
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar epsilon = Scalar(1e-8);
  VectorX<Scalar> first_moment;
  VectorX<Scalar> second_moment;
  std::int64_t step = 0;

  static OptimizerState sgd(Scalar lr) {
    OptimizerState s;
    s.learning_rate = lr;
    return s;
  }
  static OptimizerState adam(Scalar lr) {
    OptimizerState s;
    s.kind = OptimizerKind::Adam;
    s.learning_rate = lr;
    return s;
  }
};

// Ascent is descent on the negated gradient, for both optimizers.
template <typename Scalar>
VectorX<Scalar> optimizer_step(OptimizerState<Scalar>& state, const VectorX<Scalar>& params,
                               const VectorX<Scalar>& grad, Direction direction) {
  if (params.size() != grad.size()) throw ConfigError("optimizer_step: gradient length mismatch");
  if (!grad.allFinite()) throw NumericalError("optimizer_step: non-finite gradient");
  const VectorX<Scalar> g = direction == Direction::Ascent ? VectorX<Scalar>(-grad) : grad;
  if (state.kind == OptimizerKind::Sgd) {
    return params - state.learning_rate * g;
  }
  if (state.first_moment.size() != params.size()) {
    state.first_moment = VectorX<Scalar>::Zero(params.size());
    state.second_moment = VectorX<Scalar>::Zero(params.size());
    state.step = 0;
  }
  ++state.step;
  state.first_moment = state.beta1 * state.first_moment + (Scalar(1) - state.beta1) * g;
  state.second_moment = state.beta2 * state.second_moment + (Scalar(1) - state.beta2) * g.cwiseAbs2();
  const Scalar c1 = Scalar(1) - std::pow(state.beta1, static_cast<Scalar>(state.step));
  const Scalar c2 = Scalar(1) - std::pow(state.beta2, static_cast<Scalar>(state.step));
  const auto m_hat = state.first_moment.array() / c1;
  const auto v_hat = state.second_moment.array() / c2;
  return (params.array() - state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon)).matrix();
}

// Index of the largest logit per row; ties go to the lowest class index.
template <typename Scalar>
std::vector<int> argmax_rows(const SampleMatrix<Scalar>& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    int best = 0;
    for (Eigen::Index c = 1; c < logits.cols(); ++c) {
      if (logits(r, c) > logits(r, best)) best = static_cast<int>(c);
    }
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

}  // namespace afu
