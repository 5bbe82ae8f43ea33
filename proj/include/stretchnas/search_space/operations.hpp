#pragma once

#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stretchnas/autodiff/ops.hpp"

namespace stretchnas::search_space {

using ad::Real;
using ad::Shape;
using ad::Tensor;
using Rng = std::mt19937_64;
using NamedParams = std::vector<std::pair<std::string, Tensor>>;

/// Candidate operations. `Zero` exists only for the hand-crafted DARTS
/// baseline; `Conv3x3` is available but not in the default set.
enum class OperationKind {
  Identity,
  SepConv3x3,
  SepConv5x5,
  DilConv3x3,
  DilConv5x5,
  MaxPool3x3,
  AvgPool3x3,
  Conv3x3,
  Zero,
};

inline constexpr std::pair<OperationKind, std::string_view> kOperationNames[] = {
    {OperationKind::Identity, "identity"},       {OperationKind::SepConv3x3, "sep_conv_3x3"},
    {OperationKind::SepConv5x5, "sep_conv_5x5"}, {OperationKind::DilConv3x3, "dil_conv_3x3"},
    {OperationKind::DilConv5x5, "dil_conv_5x5"}, {OperationKind::MaxPool3x3, "max_pool_3x3"},
    {OperationKind::AvgPool3x3, "avg_pool_3x3"}, {OperationKind::Conv3x3, "conv_3x3"},
    {OperationKind::Zero, "zero"},
};

inline std::string_view op_name(OperationKind kind) {
  for (const auto& [k, name] : kOperationNames)
    if (k == kind) return name;
  return "?";
}

inline std::optional<OperationKind> try_parse_op(std::string_view name) {
  for (const auto& [k, n] : kOperationNames)
    if (n == name) return k;
  return std::nullopt;
}

inline OperationKind parse_op(std::string_view name) {
  if (auto k = try_parse_op(name)) return *k;
  throw ConfigError("unknown operation '" + std::string(name) + "'");
}

inline std::vector<OperationKind> default_op_set() {
  return {OperationKind::Identity,   OperationKind::SepConv3x3, OperationKind::SepConv5x5,
          OperationKind::DilConv3x3, OperationKind::MaxPool3x3, OperationKind::AvgPool3x3};
}

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) conv/linear weights.
inline Tensor init_weight(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<Real> values(ad::shape_numel(shape));
  for (auto& v : values) v = static_cast<Real>(dist(rng));
  return Tensor(std::move(shape), std::move(values), true);
}

struct BatchNorm {
  Tensor gamma;
  Tensor beta;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels)
      : gamma(Tensor::full({channels}, Real{1}, true)), beta(Tensor::zeros({channels}, true)) {}

  Tensor forward(const Tensor& x) const { return ad::batch_norm(x, gamma, beta); }
  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

/// ReLU -> k x k convolution -> batch norm.
struct ReluConvBn {
  Tensor weight;
  BatchNorm bn;
  ad::Conv2dAttrs attrs;

  ReluConvBn() = default;
  ReluConvBn(std::size_t c_in, std::size_t c_out, std::size_t kernel, std::size_t stride, std::size_t padding,
             Rng& rng)
      : weight(init_weight({c_out, c_in, kernel, kernel}, c_in * kernel * kernel, rng)),
        bn(c_out),
        attrs{stride, padding, 1, 1} {}

  Tensor forward(const Tensor& x) const { return bn.forward(ad::conv2d(ad::relu(x), weight, attrs)); }
  void collect(const std::string& prefix, NamedParams& out) const {
    out.emplace_back(prefix + ".w", weight);
    bn.collect(prefix + ".bn", out);
  }
};

/// One candidate operation instantiated on an edge with `channels` in and out.
class Operation {
 public:
  Operation() = default;

  Operation(OperationKind kind, std::size_t channels, std::size_t stride, Rng& rng)
      : kind_(kind), channels_(channels), stride_(stride) {
    const std::size_t c = channels;
    switch (kind) {
      case OperationKind::Identity:
        if (stride != 1) {
          params_ = {init_weight({c, c, 1, 1}, c, rng), Tensor::full({c}, 1, true), Tensor::zeros({c}, true)};
        }
        break;
      case OperationKind::SepConv3x3:
      case OperationKind::SepConv5x5: {
        const std::size_t k = kernel();
        for (int rep = 0; rep < 2; ++rep) {
          params_.push_back(init_weight({c, 1, k, k}, k * k, rng));
          params_.push_back(init_weight({c, c, 1, 1}, c, rng));
          params_.push_back(Tensor::full({c}, 1, true));
          params_.push_back(Tensor::zeros({c}, true));
        }
        break;
      }
      case OperationKind::DilConv3x3:
      case OperationKind::DilConv5x5: {
        const std::size_t k = kernel();
        params_ = {init_weight({c, 1, k, k}, k * k, rng), init_weight({c, c, 1, 1}, c, rng),
                   Tensor::full({c}, 1, true), Tensor::zeros({c}, true)};
        break;
      }
      case OperationKind::Conv3x3:
        params_ = {init_weight({c, c, 3, 3}, c * 9, rng), Tensor::full({c}, 1, true), Tensor::zeros({c}, true)};
        break;
      case OperationKind::MaxPool3x3:
      case OperationKind::AvgPool3x3:
      case OperationKind::Zero:
        break;
    }
  }

  OperationKind kind() const { return kind_; }
  std::size_t channels() const { return channels_; }
  std::size_t stride() const { return stride_; }
  const std::vector<Tensor>& params() const { return params_; }

  std::size_t kernel() const {
    switch (kind_) {
      case OperationKind::SepConv5x5:
      case OperationKind::DilConv5x5: return 5;
      case OperationKind::Identity:
      case OperationKind::Zero: return 1;
      default: return 3;
    }
  }

  Tensor forward(const Tensor& x) const {
    const std::size_t k = kernel();
    const std::size_t c = channels_;
    switch (kind_) {
      case OperationKind::Identity:
        if (stride_ == 1) return x;
        return ad::batch_norm(ad::conv2d(ad::relu(x), params_[0], {stride_, 0, 1, 1}), params_[1], params_[2]);
      case OperationKind::SepConv3x3:
      case OperationKind::SepConv5x5: {
        Tensor y = ad::conv2d(ad::relu(x), params_[0], {stride_, k / 2, 1, c});
        y = ad::batch_norm(ad::conv2d(y, params_[1]), params_[2], params_[3]);
        y = ad::conv2d(ad::relu(y), params_[4], {1, k / 2, 1, c});
        return ad::batch_norm(ad::conv2d(y, params_[5]), params_[6], params_[7]);
      }
      case OperationKind::DilConv3x3:
      case OperationKind::DilConv5x5: {
        Tensor y = ad::conv2d(ad::relu(x), params_[0], {stride_, k - 1, 2, c});
        return ad::batch_norm(ad::conv2d(y, params_[1]), params_[2], params_[3]);
      }
      case OperationKind::Conv3x3:
        return ad::batch_norm(ad::conv2d(ad::relu(x), params_[0], {stride_, 1, 1, 1}), params_[1], params_[2]);
      case OperationKind::MaxPool3x3: return ad::max_pool2d(x, {3, stride_, 1});
      case OperationKind::AvgPool3x3: return ad::avg_pool2d(x, {3, stride_, 1});
      case OperationKind::Zero: {
        Shape shape = x.shape();
        shape[2] = (shape[2] + stride_ - 1) / stride_;
        shape[3] = (shape[3] + stride_ - 1) / stride_;
        return Tensor::zeros(std::move(shape));
      }
    }
    throw ContractError("unknown operation kind");
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    for (std::size_t k = 0; k < params_.size(); ++k) out.emplace_back(prefix + "." + std::to_string(k), params_[k]);
  }

 private:
  OperationKind kind_ = OperationKind::Identity;
  std::size_t channels_ = 0;
  std::size_t stride_ = 1;
  std::vector<Tensor> params_;
};

/// sum_o softmax(alpha_edge)_o * o(x), softmax taken over this edge only.
inline Tensor mixed_op_forward(const Tensor& x, const Tensor& alpha_edge, std::span<const Operation> ops) {
  if (ops.empty()) throw ContractError("mixed_op_forward: empty operation set");
  if (alpha_edge.numel() != ops.size()) {
    throw ContractError("mixed_op_forward: " + std::to_string(alpha_edge.numel()) + " weights for " +
                        std::to_string(ops.size()) + " operations");
  }
  Tensor weights = ad::softmax(alpha_edge);
  std::vector<Tensor> terms;
  terms.reserve(ops.size());
  for (std::size_t k = 0; k < ops.size(); ++k) {
    terms.push_back(ad::mul_scalar(ops[k].forward(x), ad::gather(weights, {k})));
  }
  return ad::add_all(terms);
}

}  // namespace stretchnas::search_space
