#pragma once

#include <cmath>
#include <map>
#include <vector>

#include "stretchnas/autodiff/ops.hpp"
#include "stretchnas/topology/spaces.hpp"

namespace stretchnas::topology {

using ad::Real;
using ad::Tensor;

/// Per-node scores over each node's combinatorial space.
///
/// `node(k)` is undefined for nodes whose space is empty: inputs in
/// InputPair mode, and nodes with fewer than two posterior nodes in
/// OutputPair mode.
class TopologyVariables {
 public:
  TopologyVariables() = default;

  // Zero-initialised scores (uniform over every space).
  TopologyVariables(TopologyMode mode, int n_nodes) : mode_(mode), n_nodes_(n_nodes) {
    require_cell_size(n_nodes);
    nodes_.resize(static_cast<std::size_t>(n_nodes));
    for (int k = 1; k <= n_nodes; ++k) {
      const std::size_t size = space_size(mode, k, n_nodes);
      if (size > 0) nodes_[static_cast<std::size_t>(k - 1)] = Tensor::zeros({size}, true);
    }
  }

  TopologyMode mode() const { return mode_; }
  int n_nodes() const { return n_nodes_; }

  bool has(int node) const { return nodes_.at(static_cast<std::size_t>(node - 1)).defined(); }
  const Tensor& node(int node) const { return nodes_.at(static_cast<std::size_t>(node - 1)); }
  Tensor& node(int node) { return nodes_.at(static_cast<std::size_t>(node - 1)); }

  // Defined tensors in node order.
  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    for (const auto& t : nodes_)
      if (t.defined()) out.push_back(t);
    return out;
  }

  // Deep copy with fresh tensor identities.
  TopologyVariables clone() const {
    TopologyVariables copy = *this;
    for (auto& t : copy.nodes_)
      if (t.defined()) t = t.clone(true);
    return copy;
  }

 private:
  TopologyMode mode_ = TopologyMode::Arbitrary;
  int n_nodes_ = 0;
  std::vector<Tensor> nodes_;
};

/// Softmax of one node's scores. Entries are positive and sum to one.
inline Tensor topo_softmax(const Tensor& beta_node) {
  if (!beta_node.defined() || beta_node.numel() == 0) throw ContractError("topo_softmax: empty score vector");
  return ad::softmax(beta_node);
}

// Shannon entropy (nats) of a node's distribution. Not differentiable.
inline double node_entropy(const Tensor& beta_node) {
  ad::NoGradScope no_grad;
  Tensor p = topo_softmax(beta_node);
  double h = 0;
  for (Real v : p.data())
    if (v > 0) h -= static_cast<double>(v) * std::log(static_cast<double>(v));
  return h;
}

// Mean entropy over nodes whose space has more than one element.
inline double mean_entropy(const TopologyVariables& beta) {
  double total = 0;
  int count = 0;
  for (int k = 1; k <= beta.n_nodes(); ++k) {
    if (!beta.has(k) || beta.node(k).numel() < 2) continue;
    total += node_entropy(beta.node(k));
    ++count;
  }
  return count ? total / count : 0.0;
}

}  // namespace stretchnas::topology
