#pragma once

#include <map>
#include <string>

#include "stretchnas/topology/variables.hpp"

namespace stretchnas::topology {

/// Differentiable per-edge coefficient s(i, j) for every operation-carrying
/// edge of the cell.
using MergedFactors = std::map<Edge, Tensor>;

// Scale applied to merged output-pair probabilities of a node with
// `posterior` successors: C(posterior, 2) / C(posterior - 1, 1).
inline double output_pair_scale(int posterior) {
  return static_cast<double>(binomial(posterior, 2)) / static_cast<double>(binomial(posterior - 1, 1));
}

// Scale applied to merged code probabilities: (2^w - 1) / 2^(w-1).
inline double arbitrary_scale(int posterior) {
  const double full = static_cast<double>(std::uint64_t{1} << posterior);
  return (full - 1.0) / (full / 2.0);
}

namespace detail {
inline void require_mode(const TopologyVariables& beta, TopologyMode expected) {
  if (beta.mode() != expected) {
    throw ContractError("topology variables are in " + std::string(to_string(beta.mode())) + " mode, expected " +
                        std::string(to_string(expected)));
  }
}
}  // namespace detail

/// s(i,j): total probability of node j's input pairs that contain i.
inline MergedFactors merge_input_mode(const TopologyVariables& beta) {
  detail::require_mode(beta, TopologyMode::InputPair);
  const int n = beta.n_nodes();
  MergedFactors factors;
  for (int j = kInputNodes + 1; j <= n; ++j) {
    Tensor p = topo_softmax(beta.node(j));
    for (int i = 1; i < j; ++i) {
      const Edge e{i, j};
      factors[e] = ad::sum(ad::gather(p, members_with_edge(TopologyMode::InputPair, j, n, e)));
    }
  }
  return factors;
}

/// Scaled total probability of node i's output pairs that contain j.
/// A node with a single posterior node keeps that edge with factor 1.
inline MergedFactors merge_output_mode(const TopologyVariables& beta) {
  detail::require_mode(beta, TopologyMode::OutputPair);
  const int n = beta.n_nodes();
  MergedFactors factors;
  for (int i = 1; i < n; ++i) {
    const int posterior = n - i;
    if (posterior == 1) {
      factors[{i, n}] = Tensor::scalar(Real{1});
      continue;
    }
    Tensor p = topo_softmax(beta.node(i));
    const auto scale = static_cast<Real>(output_pair_scale(posterior));
    for (int j = std::max(i + 1, kInputNodes + 1); j <= n; ++j) {
      const Edge e{i, j};
      factors[e] = ad::scale(ad::sum(ad::gather(p, members_with_edge(TopologyMode::OutputPair, i, n, e))), scale);
    }
  }
  return factors;
}

/// Scaled total probability of node i's codes with bit j set.
inline MergedFactors merge_arbitrary_mode(const TopologyVariables& beta) {
  detail::require_mode(beta, TopologyMode::Arbitrary);
  const int n = beta.n_nodes();
  MergedFactors factors;
  for (int i = 1; i < n; ++i) {
    const int posterior = n - i;
    Tensor p = topo_softmax(beta.node(i));
    const auto scale = static_cast<Real>(arbitrary_scale(posterior));
    for (int j = std::max(i + 1, kInputNodes + 1); j <= n; ++j) {
      const Edge e{i, j};
      factors[e] = ad::scale(ad::sum(ad::gather(p, members_with_edge(TopologyMode::Arbitrary, i, n, e))), scale);
    }
  }
  return factors;
}

inline MergedFactors merge(const TopologyVariables& beta) {
  switch (beta.mode()) {
    case TopologyMode::InputPair: return merge_input_mode(beta);
    case TopologyMode::OutputPair: return merge_output_mode(beta);
    case TopologyMode::Arbitrary: return merge_arbitrary_mode(beta);
  }
  throw ContractError("unknown topology mode");
}

// Factor 1 on every edge: the plain DARTS node sum.
inline MergedFactors unit_factors(int n_nodes) {
  MergedFactors factors;
  for (const auto& e : cell_edges(n_nodes)) factors[e] = Tensor::scalar(Real{1});
  return factors;
}

// Largest value a factor can take in `mode` for a node with `posterior` successors.
inline double factor_upper_bound(TopologyMode mode, int posterior) {
  switch (mode) {
    case TopologyMode::InputPair: return 1.0;
    case TopologyMode::OutputPair: return posterior >= 2 ? output_pair_scale(posterior) : 1.0;
    case TopologyMode::Arbitrary: return arbitrary_scale(posterior);
  }
  return 1.0;
}

}  // namespace stretchnas::topology
