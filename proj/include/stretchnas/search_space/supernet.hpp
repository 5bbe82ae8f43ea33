#pragma once

#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "stretchnas/graph.hpp"
#include "stretchnas/search_space/operations.hpp"
#include "stretchnas/topology/merge.hpp"
#include "stretchnas/topology/regularizer.hpp"

namespace stretchnas::search_space {

using topology::MergedFactors;
using topology::TopologyMode;
using topology::TopologyVariables;

struct CellSpec {
  int n_nodes = 5;
  std::vector<OperationKind> ops = default_op_set();
  bool reduction = false;
};

/// One score vector per operation-carrying edge, ordered as cell_edges().
class OperationVariables {
 public:
  OperationVariables() = default;
  OperationVariables(int n_nodes, std::size_t n_ops) : n_nodes_(n_nodes) {
    require_cell_size(n_nodes);
    for (std::size_t k = 0; k < cell_edges(n_nodes).size(); ++k) edges_.push_back(Tensor::zeros({n_ops}, true));
  }

  int n_nodes() const { return n_nodes_; }
  std::size_t n_ops() const { return edges_.empty() ? 0 : edges_.front().numel(); }
  const Tensor& edge(const Edge& e) const { return edges_.at(edge_index(e)); }
  Tensor& edge(const Edge& e) { return edges_.at(edge_index(e)); }
  const std::vector<Tensor>& tensors() const { return edges_; }
  std::vector<Tensor>& tensors() { return edges_; }

  OperationVariables clone() const {
    OperationVariables copy = *this;
    for (auto& t : copy.edges_) t = t.clone(true);
    return copy;
  }

 private:
  int n_nodes_ = 0;
  std::vector<Tensor> edges_;
};

/// Cell of the supernet: every edge carries every candidate operation.
class SearchCell {
 public:
  SearchCell() = default;

  SearchCell(const CellSpec& spec, std::size_t c_prev_prev, std::size_t c_prev, std::size_t c, bool reduction_prev,
             Rng& rng)
      : spec_(spec), channels_(c) {
    require_cell_size(spec.n_nodes);
    pre0_ = ReluConvBn(c_prev_prev, c, 1, reduction_prev ? 2 : 1, 0, rng);
    pre1_ = ReluConvBn(c_prev, c, 1, 1, 0, rng);
    for (const auto& e : cell_edges(spec.n_nodes)) {
      const std::size_t stride = spec.reduction && !is_intermediate(e.from) ? 2 : 1;
      std::vector<Operation> ops;
      for (auto kind : spec.ops) ops.emplace_back(kind, c, stride, rng);
      edges_.push_back(std::move(ops));
    }
  }

  const CellSpec& spec() const { return spec_; }
  std::size_t channels() const { return channels_; }
  std::size_t output_channels() const { return channels_ * static_cast<std::size_t>(spec_.n_nodes - kInputNodes); }
  std::span<const Operation> ops(const Edge& e) const { return edges_.at(edge_index(e)); }

  std::pair<Tensor, Tensor> preprocess(const Tensor& s0, const Tensor& s1) const {
    return {pre0_.forward(s0), pre1_.forward(s1)};
  }

  /// x_j = sum_{i<j} s(i,j) * mixed_op(x_i); output is concat(x_3..x_N).
  Tensor forward(const Tensor& s0, const Tensor& s1, const OperationVariables& alpha,
                 const MergedFactors& factors) const {
    auto [x1, x2] = preprocess(s0, s1);
    return forward_nodes(x1, x2, alpha, factors);
  }

  // Same as forward() but starting from already-preprocessed inputs.
  Tensor forward_nodes(const Tensor& x1, const Tensor& x2, const OperationVariables& alpha,
                       const MergedFactors& factors) const {
    const int n = spec_.n_nodes;
    std::vector<Tensor> states{x1, x2};
    for (int j = kInputNodes + 1; j <= n; ++j) {
      std::vector<Tensor> terms;
      for (int i = 1; i < j; ++i) {
        const Edge e{i, j};
        auto factor = factors.find(e);
        if (factor == factors.end()) throw ContractError("cell_forward: no merged factor for edge " + to_string(e));
        Tensor y = mixed_op_forward(states[static_cast<std::size_t>(i - 1)], alpha.edge(e), ops(e));
        terms.push_back(ad::mul_scalar(y, factor->second));
      }
      states.push_back(ad::add_all(terms));
    }
    return ad::concat_channels({states.begin() + kInputNodes, states.end()});
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    pre0_.collect(prefix + ".pre0", out);
    pre1_.collect(prefix + ".pre1", out);
    const auto edges = cell_edges(spec_.n_nodes);
    for (std::size_t k = 0; k < edges.size(); ++k)
      for (const auto& op : edges_[k])
        op.collect(prefix + ".e" + std::to_string(edges[k].from) + "_" + std::to_string(edges[k].to) + "." +
                       std::string(op_name(op.kind())),
                   out);
  }

 private:
  CellSpec spec_;
  std::size_t channels_ = 0;
  ReluConvBn pre0_;
  ReluConvBn pre1_;
  std::vector<std::vector<Operation>> edges_;
};

inline Tensor cell_forward(const SearchCell& cell, const Tensor& s0, const Tensor& s1, const OperationVariables& alpha,
                           const MergedFactors& factors) {
  return cell.forward(s0, s1, alpha, factors);
}

// Layers floor(L/3) and floor(2L/3). Below three layers that rule would leave
// no normal cell, so only the later position is used.
inline std::set<int> default_reduction_positions(int layers) {
  if (layers <= 2) return {2 * layers / 3};
  return {layers / 3, 2 * layers / 3};
}

struct SupernetConfig {
  int layers = 2;
  std::size_t init_channels = 8;
  std::size_t n_classes = 2;
  int n_nodes = 5;
  std::vector<OperationKind> ops = default_op_set();
  std::set<int> reduction_positions = default_reduction_positions(2);
  // Empty: unit factors on every edge (DARTS baseline).
  std::optional<TopologyMode> topology_mode = TopologyMode::Arbitrary;
  Shape input_shape{2, 1, 1};  // C, H, W of one sample

  bool is_reduction(int layer) const { return reduction_positions.count(layer) != 0; }
};

/// Architecture variables for both cell kinds; each kind is shared by all
/// layers of that kind.
struct ArchitectureVariables {
  OperationVariables alpha_normal;
  OperationVariables alpha_reduce;
  std::optional<TopologyVariables> beta_normal;
  std::optional<TopologyVariables> beta_reduce;

  static ArchitectureVariables zeros(const SupernetConfig& config) {
    ArchitectureVariables arch;
    arch.alpha_normal = OperationVariables(config.n_nodes, config.ops.size());
    arch.alpha_reduce = OperationVariables(config.n_nodes, config.ops.size());
    if (config.topology_mode) {
      arch.beta_normal = TopologyVariables(*config.topology_mode, config.n_nodes);
      arch.beta_reduce = TopologyVariables(*config.topology_mode, config.n_nodes);
    }
    return arch;
  }

  MergedFactors factors(bool reduction) const {
    const auto& beta = reduction ? beta_reduce : beta_normal;
    if (!beta) return topology::unit_factors(alpha_normal.n_nodes());
    return topology::merge(*beta);
  }

  std::vector<Tensor> alpha_tensors() const {
    auto out = alpha_normal.tensors();
    for (const auto& t : alpha_reduce.tensors()) out.push_back(t);
    return out;
  }

  std::vector<Tensor> beta_tensors() const {
    std::vector<Tensor> out;
    if (beta_normal)
      for (const auto& t : beta_normal->tensors()) out.push_back(t);
    if (beta_reduce)
      for (const auto& t : beta_reduce->tensors()) out.push_back(t);
    return out;
  }

  // Names match the checkpoint layout.
  NamedParams named() const {
    NamedParams out;
    auto add_alpha = [&](const std::string& kind, const OperationVariables& a) {
      const auto edges = cell_edges(a.n_nodes());
      for (std::size_t k = 0; k < edges.size(); ++k)
        out.emplace_back("alpha." + kind + ".e" + std::to_string(edges[k].from) + "_" + std::to_string(edges[k].to),
                         a.tensors()[k]);
    };
    auto add_beta = [&](const std::string& kind, const std::optional<TopologyVariables>& b) {
      if (!b) return;
      for (int node = 1; node <= b->n_nodes(); ++node)
        if (b->has(node)) out.emplace_back("beta." + kind + ".n" + std::to_string(node), b->node(node));
    };
    add_alpha("normal", alpha_normal);
    add_alpha("reduce", alpha_reduce);
    add_beta("normal", beta_normal);
    add_beta("reduce", beta_reduce);
    return out;
  }

  // Sum of the regularizer over both cell kinds; zero in pair modes.
  Tensor regularizer() const {
    Tensor total = Tensor::scalar(0);
    for (const auto* beta : {&beta_normal, &beta_reduce}) {
      if (*beta && (*beta)->mode() == TopologyMode::Arbitrary) total = ad::add(total, topology::regularizer(**beta));
    }
    return total;
  }

  ArchitectureVariables clone() const {
    ArchitectureVariables copy;
    copy.alpha_normal = alpha_normal.clone();
    copy.alpha_reduce = alpha_reduce.clone();
    if (beta_normal) copy.beta_normal = beta_normal->clone();
    if (beta_reduce) copy.beta_reduce = beta_reduce->clone();
    return copy;
  }
};

/// Stem conv, L stacked search cells, global pooling and a linear classifier.
class Supernet {
 public:
  Supernet() = default;

  Supernet(SupernetConfig config, Rng& rng) : config_(std::move(config)) {
    if (config_.input_shape.size() != 3) throw ShapeError("input shape must be (C, H, W)");
    if (config_.layers < 1) throw ContractError("supernet needs at least one layer");
    const std::size_t c = config_.init_channels;
    stem_ = init_weight({c, config_.input_shape[0], 3, 3}, config_.input_shape[0] * 9, rng);
    stem_bn_ = BatchNorm(c);
    std::size_t c_pp = c, c_p = c, c_cur = c;
    bool reduction_prev = false;
    for (int layer = 0; layer < config_.layers; ++layer) {
      const bool reduction = config_.is_reduction(layer);
      if (reduction) c_cur *= 2;
      CellSpec spec{config_.n_nodes, config_.ops, reduction};
      cells_.emplace_back(spec, c_pp, c_p, c_cur, reduction_prev, rng);
      reduction_prev = reduction;
      c_pp = c_p;
      c_p = cells_.back().output_channels();
    }
    classifier_w_ = init_weight({c_p, config_.n_classes}, c_p, rng);
    classifier_b_ = Tensor::zeros({config_.n_classes}, true);
  }

  const SupernetConfig& config() const { return config_; }
  const std::vector<SearchCell>& cells() const { return cells_; }

  Tensor forward(const Tensor& batch, const ArchitectureVariables& arch) const {
    return forward(batch, arch, arch.factors(false), arch.factors(true));
  }

  Tensor forward(const Tensor& batch, const ArchitectureVariables& arch, const MergedFactors& normal,
                 const MergedFactors& reduce) const {
    if (batch.dim() != 4 || batch.size(1) != config_.input_shape[0] || batch.size(2) != config_.input_shape[1] ||
        batch.size(3) != config_.input_shape[2]) {
      throw ShapeError("supernet input " + ad::shape_str(batch.shape()) + " does not match configured sample shape " +
                       ad::shape_str(config_.input_shape));
    }
    Tensor s0 = stem_bn_.forward(ad::conv2d(batch, stem_, {1, 1, 1, 1}));
    Tensor s1 = s0;
    for (const auto& cell : cells_) {
      const bool red = cell.spec().reduction;
      Tensor out = cell.forward(s0, s1, red ? arch.alpha_reduce : arch.alpha_normal, red ? reduce : normal);
      s0 = s1;
      s1 = out;
    }
    return ad::add_rowwise(ad::matmul(ad::global_avg_pool(s1), classifier_w_), classifier_b_);
  }

  NamedParams named_parameters() const {
    NamedParams out;
    out.emplace_back("stem.w", stem_);
    stem_bn_.collect("stem.bn", out);
    for (std::size_t k = 0; k < cells_.size(); ++k) cells_[k].collect("cell" + std::to_string(k), out);
    out.emplace_back("classifier.w", classifier_w_);
    out.emplace_back("classifier.b", classifier_b_);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

 private:
  SupernetConfig config_;
  Tensor stem_;
  BatchNorm stem_bn_;
  std::vector<SearchCell> cells_;
  Tensor classifier_w_;
  Tensor classifier_b_;
};

}  // namespace stretchnas::search_space
