#pragma once

#include <compare>
#include <string>
#include <vector>

#include "stretchnas/errors.hpp"

namespace stretchnas {

// Nodes are 1-based: 1 and 2 are the cell inputs, 3..N are intermediate.
inline constexpr int kInputNodes = 2;

inline bool is_intermediate(int node) { return node > kInputNodes; }

/// Directed edge (from, to) of a cell DAG, from < to.
struct Edge {
  int from = 0;
  int to = 0;
  auto operator<=>(const Edge&) const = default;
};

inline std::string to_string(const Edge& e) {
  return "(" + std::to_string(e.from) + "," + std::to_string(e.to) + ")";
}

inline void require_cell_size(int n_nodes) {
  if (n_nodes < 4) throw ContractError("a cell needs at least 4 nodes, got " + std::to_string(n_nodes));
}

/// Every edge that can carry an operation: targets are intermediate nodes.
/// Ordered by target, then source.
inline std::vector<Edge> cell_edges(int n_nodes) {
  std::vector<Edge> edges;
  for (int j = kInputNodes + 1; j <= n_nodes; ++j)
    for (int i = 1; i < j; ++i) edges.push_back({i, j});
  return edges;
}

// Position of `e` in cell_edges(n).
inline std::size_t edge_index(const Edge& e) {
  const int j = e.to, i = e.from;
  // Targets 3..j-1 contribute 2 + 3 + ... + (j-2) edges.
  const int before = (j - 1) * (j - 2) / 2 - 1;
  return static_cast<std::size_t>(before + (i - 1));
}

}  // namespace stretchnas
