#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "stretchnas/errors.hpp"
#include "stretchnas/graph.hpp"

namespace stretchnas::topology {

enum class TopologyMode { InputPair, OutputPair, Arbitrary };

inline std::string_view to_string(TopologyMode mode) {
  switch (mode) {
    case TopologyMode::InputPair: return "input-pair";
    case TopologyMode::OutputPair: return "output-pair";
    case TopologyMode::Arbitrary: return "arbitrary";
  }
  return "?";
}

inline TopologyMode parse_topology_mode(std::string_view text) {
  if (text == "input-pair") return TopologyMode::InputPair;
  if (text == "output-pair") return TopologyMode::OutputPair;
  if (text == "arbitrary") return TopologyMode::Arbitrary;
  throw ConfigError("unknown topology mode '" + std::string(text) + "'");
}

inline std::uint64_t binomial(int n, int k) {
  if (k < 0 || n < 0 || k > n) return 0;
  std::uint64_t result = 1;
  for (int i = 1; i <= k; ++i) result = result * static_cast<std::uint64_t>(n - k + i) / static_cast<std::uint64_t>(i);
  return result;
}

using NodePair = std::pair<int, int>;

/// Bits over the posterior nodes i+1..N of node i; bits[t] is edge (i, i+1+t).
struct BinaryCode {
  std::vector<std::uint8_t> bits;

  bool connects(int from, int to) const {
    const int t = to - from - 1;
    return t >= 0 && t < static_cast<int>(bits.size()) && bits[static_cast<std::size_t>(t)] != 0;
  }
  bool empty_code() const {
    for (auto b : bits)
      if (b) return false;
    return true;
  }
  bool operator==(const BinaryCode&) const = default;
};

/// Unordered input-edge pairs (m, n), m < n < j, in lexicographic order.
/// Input nodes (j <= 2) have none.
inline std::vector<NodePair> enumerate_input_pairs(int j, int n_nodes) {
  if (j < 1 || j > n_nodes) throw ContractError("input pairs: node " + std::to_string(j) + " out of range");
  std::vector<NodePair> pairs;
  if (j <= kInputNodes) return pairs;
  for (int m = 1; m < j; ++m)
    for (int n = m + 1; n < j; ++n) pairs.emplace_back(m, n);
  return pairs;
}

/// Pairs (m, n) of posterior nodes, i < m < n <= N, in lexicographic order.
inline std::vector<NodePair> enumerate_output_pairs(int i, int n_nodes) {
  if (i < 1 || i > n_nodes) throw ContractError("output pairs: node " + std::to_string(i) + " out of range");
  std::vector<NodePair> pairs;
  for (int m = i + 1; m <= n_nodes; ++m)
    for (int n = m + 1; n <= n_nodes; ++n) pairs.emplace_back(m, n);
  return pairs;
}

/// All 2^(N-i) codes over node i's posterior nodes in binary counting order,
/// the first posterior node being the most significant bit. Index 0 is the
/// all-zero code (node removed).
inline std::vector<BinaryCode> enumerate_codes(int i, int n_nodes) {
  if (i < 1 || i > n_nodes) throw ContractError("codes: node " + std::to_string(i) + " out of range");
  const int width = n_nodes - i;
  if (width > 30) throw ContractError("codes: space too large");
  std::vector<BinaryCode> codes;
  const std::uint32_t count = 1u << width;
  codes.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    BinaryCode code;
    code.bits.resize(static_cast<std::size_t>(width));
    for (int t = 0; t < width; ++t) code.bits[static_cast<std::size_t>(t)] = (k >> (width - 1 - t)) & 1u;
    codes.push_back(std::move(code));
  }
  return codes;
}

// Size of the combinatorial space owned by `node` in `mode`.
inline std::size_t space_size(TopologyMode mode, int node, int n_nodes) {
  switch (mode) {
    case TopologyMode::InputPair: return node <= kInputNodes ? 0 : binomial(node - 1, 2);
    case TopologyMode::OutputPair: return binomial(n_nodes - node, 2);
    case TopologyMode::Arbitrary: return std::size_t{1} << (n_nodes - node);
  }
  return 0;
}

// Indices into node `owner`'s space whose elements contain edge (from, to).
inline std::vector<std::size_t> members_with_edge(TopologyMode mode, int owner, int n_nodes, const Edge& edge) {
  std::vector<std::size_t> idx;
  switch (mode) {
    case TopologyMode::InputPair: {
      const auto pairs = enumerate_input_pairs(owner, n_nodes);
      for (std::size_t k = 0; k < pairs.size(); ++k)
        if (pairs[k].first == edge.from || pairs[k].second == edge.from) idx.push_back(k);
      break;
    }
    case TopologyMode::OutputPair: {
      const auto pairs = enumerate_output_pairs(owner, n_nodes);
      for (std::size_t k = 0; k < pairs.size(); ++k)
        if (pairs[k].first == edge.to || pairs[k].second == edge.to) idx.push_back(k);
      break;
    }
    case TopologyMode::Arbitrary: {
      const auto codes = enumerate_codes(owner, n_nodes);
      for (std::size_t k = 0; k < codes.size(); ++k)
        if (codes[k].connects(edge.from, edge.to)) idx.push_back(k);
      break;
    }
  }
  return idx;
}

}  // namespace stretchnas::topology
