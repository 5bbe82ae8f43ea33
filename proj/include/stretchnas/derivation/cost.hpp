#pragma once

#include <cstdint>

#include "stretchnas/derivation/architecture.hpp"
#include "stretchnas/search_space/supernet.hpp"

namespace stretchnas::derivation {

/// Parameter count (conv and linear weights, linear bias, batch-norm affine)
/// and per-sample FLOPs (2 x multiply-accumulates of conv and linear layers).
struct Cost {
  std::uint64_t params = 0;
  std::uint64_t flops = 0;

  Cost& operator+=(const Cost& other) {
    params += other.params;
    flops += other.flops;
    return *this;
  }
  bool operator==(const Cost&) const = default;
};

namespace detail {

// Convolution without bias followed by batch norm, output map out_hw.
inline Cost conv_bn_cost(std::uint64_t c_in_per_group, std::uint64_t c_out, std::uint64_t k, std::uint64_t out_hw) {
  const std::uint64_t weights = c_out * c_in_per_group * k * k;
  return {weights + 2 * c_out, 2 * weights * out_hw};
}

}  // namespace detail

inline std::size_t strided_extent(std::size_t in, std::size_t stride) { return (in + stride - 1) / stride; }

/// Cost of one operation on a C-channel H x W input.
inline Cost op_cost(OperationKind kind, std::uint64_t c, std::size_t stride, std::size_t h, std::size_t w) {
  const std::uint64_t out_hw = strided_extent(h, stride) * strided_extent(w, stride);
  Cost cost;
  switch (kind) {
    case OperationKind::Identity:
      if (stride != 1) cost += detail::conv_bn_cost(c, c, 1, out_hw);
      break;
    case OperationKind::SepConv3x3:
    case OperationKind::SepConv5x5: {
      const std::uint64_t k = kind == OperationKind::SepConv3x3 ? 3 : 5;
      for (int rep = 0; rep < 2; ++rep) {
        Cost depthwise = detail::conv_bn_cost(1, c, k, out_hw);
        depthwise.params -= 2 * c;  // no norm between depthwise and pointwise
        cost += depthwise;
        cost += detail::conv_bn_cost(c, c, 1, out_hw);
      }
      break;
    }
    case OperationKind::DilConv3x3:
    case OperationKind::DilConv5x5: {
      const std::uint64_t k = kind == OperationKind::DilConv3x3 ? 3 : 5;
      Cost depthwise = detail::conv_bn_cost(1, c, k, out_hw);
      depthwise.params -= 2 * c;
      cost += depthwise;
      cost += detail::conv_bn_cost(c, c, 1, out_hw);
      break;
    }
    case OperationKind::Conv3x3: cost += detail::conv_bn_cost(c, c, 3, out_hw); break;
    case OperationKind::MaxPool3x3:
    case OperationKind::AvgPool3x3:
    case OperationKind::Zero: break;
  }
  return cost;
}

// h, w: spatial size of the previous cell's output. Both preprocessors emit
// that size (pre0 reads a larger map with stride 2 after a reduction).
inline Cost cell_cost(const DerivedArchitecture& arch, std::uint64_t c_pp, std::uint64_t c_p, std::uint64_t c,
                      bool reduction, std::size_t h, std::size_t w) {
  Cost cost;
  cost += detail::conv_bn_cost(c_pp, c, 1, h * w);
  cost += detail::conv_bn_cost(c_p, c, 1, h * w);
  for (const auto& e : arch.edges) {
    if (!feeds_kept(arch, e)) continue;
    const std::size_t stride = reduction && !is_intermediate(e.edge.from) ? 2 : 1;
    const std::size_t in_h = is_intermediate(e.edge.from) && reduction ? strided_extent(h, 2) : h;
    const std::size_t in_w = is_intermediate(e.edge.from) && reduction ? strided_extent(w, 2) : w;
    cost += op_cost(e.op, c, stride, in_h, in_w);
  }
  return cost;
}

/// Whole-network cost of a genotype stacked with `config`'s layout.
inline Cost count_params_flops(const Genotype& genotype, const search_space::SupernetConfig& config) {
  const std::uint64_t c0 = config.init_channels;
  std::size_t h = config.input_shape.at(1), w = config.input_shape.at(2);
  Cost cost = detail::conv_bn_cost(config.input_shape.at(0), c0, 3, h * w);
  std::uint64_t c_pp = c0, c_p = c0, c = c0;
  for (int layer = 0; layer < config.layers; ++layer) {
    const bool reduction = config.is_reduction(layer);
    if (reduction) c *= 2;
    const DerivedArchitecture& arch = reduction ? genotype.reduce : genotype.normal;
    cost += cell_cost(arch, c_pp, c_p, c, reduction, h, w);
    if (reduction) {
      h = strided_extent(h, 2);
      w = strided_extent(w, 2);
    }
    c_pp = c_p;
    c_p = c * arch.kept_intermediate_nodes().size();
  }
  const std::uint64_t k = config.n_classes;
  cost += Cost{c_p * k + k, 2 * c_p * k};
  return cost;
}

}  // namespace stretchnas::derivation
