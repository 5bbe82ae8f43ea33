#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "stretchnas/graph.hpp"
#include "stretchnas/search_space/operations.hpp"

namespace stretchnas::derivation {

using search_space::OperationKind;

enum class CellKind { Normal, Reduction };

inline std::string_view to_string(CellKind kind) { return kind == CellKind::Normal ? "normal" : "reduce"; }

struct Provenance {
  int layers = 0;
  std::string config_hash = "none";
  int epoch = 0;
  bool operator==(const Provenance&) const = default;
};

struct ArchEdge {
  Edge edge;
  OperationKind op = OperationKind::Identity;
  bool operator==(const ArchEdge&) const = default;
};

/// Discrete cell: kept edges with one operation each, and per-node removal
/// flags. Removed nodes are absent from the output concat.
struct DerivedArchitecture {
  int n_nodes = 0;
  std::vector<ArchEdge> edges;  // sorted by (to, from)
  std::vector<bool> removed;    // index node - 1
  CellKind kind = CellKind::Normal;
  Provenance provenance;

  bool operator==(const DerivedArchitecture&) const = default;

  bool is_removed(int node) const { return removed.at(static_cast<std::size_t>(node - 1)); }

  std::vector<int> kept_intermediate_nodes() const {
    std::vector<int> nodes;
    for (int j = kInputNodes + 1; j <= n_nodes; ++j)
      if (!is_removed(j)) nodes.push_back(j);
    return nodes;
  }

  void sort_edges() {
    std::sort(edges.begin(), edges.end(), [](const ArchEdge& a, const ArchEdge& b) {
      return std::pair(a.edge.to, a.edge.from) < std::pair(b.edge.to, b.edge.from);
    });
  }
};

/// Normal and reduction cells of one derived network.
struct Genotype {
  DerivedArchitecture normal;
  DerivedArchitecture reduce;
  bool operator==(const Genotype&) const = default;
};

struct ValidityReport {
  std::vector<int> starved;   // kept intermediate nodes without a kept input
  std::vector<int> dangling;  // input nodes that feed no kept node
  bool empty_cell = false;    // no kept intermediate node
  bool valid = false;

  std::string summary() const {
    std::string s = valid ? "valid" : "invalid";
    if (empty_cell) s += "; empty cell";
    if (!starved.empty()) {
      s += "; starved nodes:";
      for (int n : starved) s += " " + std::to_string(n);
    }
    if (!dangling.empty()) {
      s += "; unused inputs:";
      for (int n : dangling) s += " " + std::to_string(n);
    }
    return s;
  }
};

inline bool feeds_kept(const DerivedArchitecture& arch, const ArchEdge& e) {
  return !arch.is_removed(e.edge.to) && (e.edge.from <= kInputNodes || !arch.is_removed(e.edge.from));
}

inline ValidityReport validate(const DerivedArchitecture& arch) {
  ValidityReport report;
  const auto kept = arch.kept_intermediate_nodes();
  report.empty_cell = kept.empty();
  for (int j : kept) {
    const bool fed = std::any_of(arch.edges.begin(), arch.edges.end(),
                                 [&](const ArchEdge& e) { return e.edge.to == j && feeds_kept(arch, e); });
    if (!fed) report.starved.push_back(j);
  }
  for (int i = 1; i <= kInputNodes; ++i) {
    const bool used = std::any_of(arch.edges.begin(), arch.edges.end(),
                                  [&](const ArchEdge& e) { return e.edge.from == i && feeds_kept(arch, e); });
    if (!used) report.dangling.push_back(i);
  }
  report.valid = report.starved.empty() && !report.empty_cell;
  return report;
}

// Longest chain of kept intermediate nodes along kept edges.
inline int cell_depth(const DerivedArchitecture& arch) {
  std::vector<int> depth(static_cast<std::size_t>(arch.n_nodes + 1), 0);
  int best = 0;
  for (int j = kInputNodes + 1; j <= arch.n_nodes; ++j) {
    if (arch.is_removed(j)) continue;
    int d = 0;
    for (const auto& e : arch.edges)
      if (e.edge.to == j && feeds_kept(arch, e)) d = std::max(d, depth[static_cast<std::size_t>(e.edge.from)]);
    depth[static_cast<std::size_t>(j)] = d + 1;
    best = std::max(best, d + 1);
  }
  return best;
}

}  // namespace stretchnas::derivation
