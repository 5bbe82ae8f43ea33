#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <vector>

#include "stretchnas/derivation/architecture.hpp"
#include "stretchnas/search_space/supernet.hpp"
#include "stretchnas/topology/variables.hpp"

namespace stretchnas::derivation {

using search_space::OperationVariables;
using topology::TopologyMode;
using topology::TopologyVariables;

// First index of the largest entry.
inline std::size_t argmax_lowest(std::span<const ad::Real> values) {
  if (values.empty()) throw ContractError("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t k = 1; k < values.size(); ++k)
    if (values[k] > values[best]) best = k;
  return best;
}

inline std::vector<ad::Real> probabilities(const ad::Tensor& beta_node) {
  ad::NoGradScope no_grad;
  return topology::topo_softmax(beta_node).values();
}

struct TopologyDecode {
  int n_nodes = 0;
  std::vector<Edge> edges;           // sorted by (to, from)
  std::vector<bool> removed;         // index node - 1
  std::vector<std::size_t> choice;   // argmax index per node; npos when the node has no space

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
};

/// Argmax pair or code per node. In Arbitrary mode an all-zero argmax code
/// removes the node; edges into the input node 2 never exist.
inline TopologyDecode decode_topology(const TopologyVariables& beta) {
  const int n = beta.n_nodes();
  TopologyDecode out;
  out.n_nodes = n;
  out.removed.assign(static_cast<std::size_t>(n), false);
  out.choice.assign(static_cast<std::size_t>(n), TopologyDecode::npos);
  std::vector<Edge> edges;
  auto add = [&](int from, int to) {
    if (to > kInputNodes) edges.push_back({from, to});
  };
  for (int k = 1; k <= n; ++k) {
    if (!beta.has(k)) {
      if (beta.mode() == TopologyMode::OutputPair && k == n - 1) add(k, n);
      continue;
    }
    const std::size_t best = argmax_lowest(probabilities(beta.node(k)));
    out.choice[static_cast<std::size_t>(k - 1)] = best;
    switch (beta.mode()) {
      case TopologyMode::InputPair: {
        const auto pair = topology::enumerate_input_pairs(k, n)[best];
        add(pair.first, k);
        add(pair.second, k);
        break;
      }
      case TopologyMode::OutputPair: {
        const auto pair = topology::enumerate_output_pairs(k, n)[best];
        add(k, pair.first);
        add(k, pair.second);
        break;
      }
      case TopologyMode::Arbitrary: {
        const auto code = topology::enumerate_codes(k, n)[best];
        if (code.empty_code() && k > kInputNodes && k < n) out.removed[static_cast<std::size_t>(k - 1)] = true;
        for (int j = k + 1; j <= n; ++j)
          if (code.connects(k, j)) add(k, j);
        break;
      }
    }
  }
  std::sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
    return std::pair(a.to, a.from) < std::pair(b.to, b.from);
  });
  out.edges = std::move(edges);
  return out;
}

/// Argmax operation per edge, ties to the lowest index.
inline std::vector<ArchEdge> decode_operations(const OperationVariables& alpha, std::span<const Edge> edges,
                                               std::span<const OperationKind> ops) {
  if (alpha.n_ops() != ops.size()) throw ContractError("decode_operations: operation list does not match alpha");
  std::vector<ArchEdge> out;
  for (const auto& e : edges) out.push_back({e, ops[argmax_lowest(alpha.edge(e).data())]});
  return out;
}

/// Full decode of one cell kind. Edges into removed nodes are pruned.
inline DerivedArchitecture derive_cell(const OperationVariables& alpha, const TopologyVariables& beta,
                                       std::span<const OperationKind> ops, CellKind kind, Provenance provenance) {
  const TopologyDecode topo = decode_topology(beta);
  DerivedArchitecture arch;
  arch.n_nodes = topo.n_nodes;
  arch.removed = topo.removed;
  arch.kind = kind;
  arch.provenance = std::move(provenance);
  for (const auto& e : decode_operations(alpha, topo.edges, ops))
    if (!arch.is_removed(e.edge.to)) arch.edges.push_back(e);
  arch.sort_edges();
  return arch;
}

inline Genotype derive_genotype(const search_space::ArchitectureVariables& arch,
                                std::span<const OperationKind> ops, const Provenance& provenance) {
  if (!arch.beta_normal || !arch.beta_reduce) throw ContractError("derive_genotype: no topology variables");
  return {derive_cell(arch.alpha_normal, *arch.beta_normal, ops, CellKind::Normal, provenance),
          derive_cell(arch.alpha_reduce, *arch.beta_reduce, ops, CellKind::Reduction, provenance)};
}

/// Top-2 input edges per node by strongest non-zero operation weight, each
/// labelled with its strongest non-zero operation.
inline DerivedArchitecture hand_crafted_top2_decode(const OperationVariables& alpha,
                                                    std::span<const OperationKind> ops, CellKind kind,
                                                    Provenance provenance) {
  if (alpha.n_ops() != ops.size()) throw ContractError("top-2 decode: operation list does not match alpha");
  const int n = alpha.n_nodes();
  DerivedArchitecture arch;
  arch.n_nodes = n;
  arch.removed.assign(static_cast<std::size_t>(n), false);
  arch.kind = kind;
  arch.provenance = std::move(provenance);
  for (int j = kInputNodes + 1; j <= n; ++j) {
    struct Candidate {
      int from;
      ad::Real strength;
      OperationKind op;
    };
    std::vector<Candidate> candidates;
    for (int i = 1; i < j; ++i) {
      const std::vector<ad::Real> p = probabilities(alpha.edge({i, j}));
      std::size_t best = ops.size();
      for (std::size_t k = 0; k < ops.size(); ++k) {
        if (ops[k] == OperationKind::Zero) continue;
        if (best == ops.size() || p[k] > p[best]) best = k;
      }
      if (best == ops.size()) throw ContractError("top-2 decode: operation set has only the zero operation");
      candidates.push_back({i, p[best], ops[best]});
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& a, const Candidate& b) { return a.strength > b.strength; });
    for (std::size_t k = 0; k < std::min<std::size_t>(2, candidates.size()); ++k)
      arch.edges.push_back({{candidates[k].from, j}, candidates[k].op});
  }
  arch.sort_edges();
  return arch;
}

// Unscaled probability that node `owner`'s distribution includes edge e.
inline double edge_probability(const TopologyVariables& beta, const Edge& e) {
  const int owner = beta.mode() == TopologyMode::InputPair ? e.to : e.from;
  if (!beta.has(owner)) return beta.mode() == TopologyMode::OutputPair && e.to == beta.n_nodes() ? 1.0 : 0.0;
  const auto p = probabilities(beta.node(owner));
  double total = 0;
  for (std::size_t k : topology::members_with_edge(beta.mode(), owner, beta.n_nodes(), e)) total += p[k];
  return total;
}

/// Gives each starved node its most probable input edge from a kept node.
/// Not part of the decode rule; only used when explicitly requested.
inline DerivedArchitecture repair(DerivedArchitecture arch, const OperationVariables& alpha,
                                  const TopologyVariables& beta, std::span<const OperationKind> ops) {
  for (int j : validate(arch).starved) {
    int best_from = 0;
    double best_p = -1;
    for (int i = 1; i < j; ++i) {
      if (i > kInputNodes && arch.is_removed(i)) continue;
      const double p = edge_probability(beta, {i, j});
      if (p > best_p) {
        best_p = p;
        best_from = i;
      }
    }
    const Edge e{best_from, j};
    arch.edges.push_back({e, ops[argmax_lowest(alpha.edge(e).data())]});
  }
  arch.sort_edges();
  return arch;
}

}  // namespace stretchnas::derivation
