#pragma once

#include <algorithm>

#include "stretchnas/topology/merge.hpp"

namespace stretchnas::topology {

// Argmax of the probabilities with ties to the lowest index, i.e. the
// all-zero code on exact ties.
inline bool decodes_removed(const Tensor& probs) {
  const auto v = probs.data();
  return std::max_element(v.begin(), v.end()) == v.begin();
}

/// Penalty on topologies whose argmax decode leaves an intermediate node
/// without inputs:
///
///   r = sum_{j >= 3} prod_{i < j} (1 - max_{b: b_j = 1} p_i(b) / max_b p_i(b))
///
/// Each factor is exactly zero when node i's most probable code feeds j, so r
/// vanishes exactly on valid decodes. A node j < N whose own most probable
/// code is the all-zero code decodes as removed and contributes no term.
/// Only defined for Arbitrary mode.
inline Tensor regularizer(const TopologyVariables& beta) {
  detail::require_mode(beta, TopologyMode::Arbitrary);
  const int n = beta.n_nodes();

  std::vector<Tensor> probs(static_cast<std::size_t>(n));
  std::vector<Tensor> peak(static_cast<std::size_t>(n));
  for (int i = 1; i < n; ++i) {
    probs[static_cast<std::size_t>(i - 1)] = topo_softmax(beta.node(i));
    peak[static_cast<std::size_t>(i - 1)] = ad::max(probs[static_cast<std::size_t>(i - 1)]);
  }

  Tensor total = Tensor::scalar(0);
  for (int j = kInputNodes + 1; j <= n; ++j) {
    if (j < n && decodes_removed(probs[static_cast<std::size_t>(j - 1)])) continue;
    Tensor product;
    for (int i = 1; i < j; ++i) {
      const auto& p = probs[static_cast<std::size_t>(i - 1)];
      Tensor feeding = ad::max(ad::gather(p, members_with_edge(TopologyMode::Arbitrary, i, n, {i, j})));
      Tensor term = ad::affine(ad::div(feeding, peak[static_cast<std::size_t>(i - 1)]), Real{-1}, Real{1});
      product = product.defined() ? ad::mul(product, term) : term;
    }
    total = ad::add(total, product);
  }
  return total;
}

/// task + lambda * r. Pair modes carry no regularizer and return `task`.
inline Tensor loss_with_regularizer(const Tensor& task_loss, const TopologyVariables& beta, Real lambda) {
  if (lambda < 0) throw ContractError("regularizer weight must be non-negative");
  if (beta.mode() != TopologyMode::Arbitrary || lambda == 0) return task_loss;
  return ad::add(task_loss, ad::scale(regularizer(beta), lambda));
}

inline Tensor loss_with_regularizer(const Tensor& task_loss, const Tensor& r, Real lambda) {
  if (lambda < 0) throw ContractError("regularizer weight must be non-negative");
  return ad::add(task_loss, ad::scale(r, lambda));
}

}  // namespace stretchnas::topology
