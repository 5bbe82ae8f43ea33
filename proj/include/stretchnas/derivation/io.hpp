#pragma once

#include <charconv>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "stretchnas/derivation/architecture.hpp"

namespace stretchnas::derivation {

inline std::string dot_node_name(int node) {
  if (node == 1) return "c_{k-2}";
  if (node == 2) return "c_{k-1}";
  return std::to_string(node);
}

/// Graphviz digraph of one cell: operation-labelled edges plus one edge from
/// every kept intermediate node to "out".
inline std::string export_dot(const DerivedArchitecture& arch) {
  std::ostringstream out;
  out << "digraph " << to_string(arch.kind) << " {\n";
  out << "  rankdir=LR;\n";
  for (const auto& e : arch.edges) {
    if (!feeds_kept(arch, e)) continue;
    out << "  \"" << dot_node_name(e.edge.from) << "\" -> \"" << dot_node_name(e.edge.to) << "\" [label=\""
        << search_space::op_name(e.op) << "\"];\n";
  }
  for (int j : arch.kept_intermediate_nodes()) out << "  \"" << j << "\" -> \"out\";\n";
  out << "}\n";
  return out.str();
}

inline constexpr std::string_view kArchHeader = "stretchnas-architecture";
inline constexpr int kArchVersion = 1;

namespace detail {

inline void write_cell(std::ostream& out, const DerivedArchitecture& arch) {
  out << "cell " << to_string(arch.kind) << "\n";
  out << "nodes " << arch.n_nodes << "\n";
  out << "layers " << arch.provenance.layers << "\n";
  out << "config_hash " << arch.provenance.config_hash << "\n";
  out << "epoch " << arch.provenance.epoch << "\n";
  out << "removed";
  for (int j = kInputNodes + 1; j <= arch.n_nodes; ++j)
    if (arch.is_removed(j)) out << " " << j;
  out << "\n";
  for (const auto& e : arch.edges)
    out << "edge " << e.edge.from << " " << e.edge.to << " " << search_space::op_name(e.op) << "\n";
  out << "end\n";
}

struct Token {
  std::string_view text;
  std::size_t column;
};

inline std::vector<Token> tokenize(std::string_view line) {
  std::vector<Token> tokens;
  std::size_t k = 0;
  while (k < line.size()) {
    while (k < line.size() && (line[k] == ' ' || line[k] == '\t' || line[k] == '\r')) ++k;
    if (k >= line.size()) break;
    const std::size_t start = k;
    while (k < line.size() && line[k] != ' ' && line[k] != '\t' && line[k] != '\r') ++k;
    tokens.push_back({line.substr(start, k - start), start + 1});
  }
  return tokens;
}

class ArchParser {
 public:
  explicit ArchParser(std::string_view text) : text_(text) {}

  std::vector<DerivedArchitecture> parse() {
    std::vector<DerivedArchitecture> cells;
    bool header = false;
    DerivedArchitecture* cell = nullptr;
    bool have_nodes = false;
    std::set<std::string> seen;
    std::set<Edge> edges;
    while (next_line()) {
      if (tokens_.empty() || tokens_[0].text.front() == '#') continue;
      const std::string_view key = tokens_[0].text;
      if (!header) {
        if (key != kArchHeader) fail("expected '" + std::string(kArchHeader) + "' header", tokens_[0]);
        expect_count(2);
        if (integer(tokens_[1]) != kArchVersion) fail("unsupported version", tokens_[1]);
        header = true;
        continue;
      }
      if (!cell) {
        if (key != "cell") fail("expected 'cell'", tokens_[0]);
        expect_count(2);
        cells.emplace_back();
        cell = &cells.back();
        if (tokens_[1].text == "normal") cell->kind = CellKind::Normal;
        else if (tokens_[1].text == "reduce") cell->kind = CellKind::Reduction;
        else fail("unknown cell kind '" + std::string(tokens_[1].text) + "'", tokens_[1]);
        have_nodes = false;
        seen.clear();
        edges.clear();
        continue;
      }
      if (key == "end") {
        expect_count(1);
        if (!have_nodes) fail("cell without 'nodes'", tokens_[0]);
        for (const char* required : {"layers", "config_hash", "epoch", "removed"})
          if (!seen.count(required)) fail(std::string("cell without '") + required + "'", tokens_[0]);
        cell->sort_edges();
        cell = nullptr;
        continue;
      }
      if (key != "edge") {
        if (!seen.insert(std::string(key)).second) fail("duplicate field '" + std::string(key) + "'", tokens_[0]);
      }
      if (key == "nodes") {
        expect_count(2);
        cell->n_nodes = integer(tokens_[1]);
        if (cell->n_nodes < 4) fail("a cell needs at least 4 nodes", tokens_[1]);
        cell->removed.assign(static_cast<std::size_t>(cell->n_nodes), false);
        have_nodes = true;
      } else if (key == "layers") {
        expect_count(2);
        cell->provenance.layers = integer(tokens_[1]);
      } else if (key == "config_hash") {
        expect_count(2);
        cell->provenance.config_hash = std::string(tokens_[1].text);
      } else if (key == "epoch") {
        expect_count(2);
        cell->provenance.epoch = integer(tokens_[1]);
      } else if (key == "removed") {
        require_nodes(have_nodes);
        for (std::size_t k = 1; k < tokens_.size(); ++k) {
          const int node = integer(tokens_[k]);
          if (node <= kInputNodes || node > cell->n_nodes) fail("removed node out of range", tokens_[k]);
          cell->removed[static_cast<std::size_t>(node - 1)] = true;
        }
      } else if (key == "edge") {
        require_nodes(have_nodes);
        expect_count(4);
        const int from = integer(tokens_[1]);
        const int to = integer(tokens_[2]);
        if (from >= to) fail("non-topological edge " + std::to_string(from) + "->" + std::to_string(to), tokens_[1]);
        if (from < 1 || to > cell->n_nodes) fail("edge node out of range", tokens_[1]);
        if (to <= kInputNodes) fail("edge into an input node", tokens_[2]);
        auto op = search_space::try_parse_op(tokens_[3].text);
        if (!op) fail("unknown operation '" + std::string(tokens_[3].text) + "'", tokens_[3]);
        if (!edges.insert({from, to}).second) fail("duplicate edge", tokens_[1]);
        cell->edges.push_back({{from, to}, *op});
      } else {
        fail("unknown field '" + std::string(key) + "'", tokens_[0]);
      }
    }
    if (!header) throw ParseError("empty architecture file", line_no_ + 1, 1);
    if (cell) throw ParseError("missing 'end' for cell", line_no_ + 1, 1);
    if (cells.empty()) throw ParseError("no cells", line_no_ + 1, 1);
    return cells;
  }

 private:
  bool next_line() {
    if (pos_ > text_.size()) return false;
    const std::size_t end = text_.find('\n', pos_);
    const std::string_view line = text_.substr(pos_, end == std::string_view::npos ? std::string_view::npos : end - pos_);
    pos_ = end == std::string_view::npos ? text_.size() + 1 : end + 1;
    ++line_no_;
    tokens_ = tokenize(line);
    return true;
  }

  [[noreturn]] void fail(const std::string& what, const Token& at) const {
    throw ParseError(what, line_no_, at.column);
  }

  void expect_count(std::size_t n) const {
    if (tokens_.size() < n) fail("missing value", tokens_.back());
    if (tokens_.size() > n) fail("unexpected token '" + std::string(tokens_[n].text) + "'", tokens_[n]);
  }

  void require_nodes(bool have) const {
    if (!have) fail("'nodes' must come first", tokens_[0]);
  }

  int integer(const Token& t) const {
    int value = 0;
    const auto* first = t.text.data();
    const auto* last = first + t.text.size();
    const auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc() || ptr != last) fail("expected an integer, got '" + std::string(t.text) + "'", t);
    return value;
  }

  std::string_view text_;
  std::size_t pos_ = 0;
  std::size_t line_no_ = 0;
  std::vector<Token> tokens_;
};

}  // namespace detail

inline std::string export_arch(const DerivedArchitecture& arch) {
  std::ostringstream out;
  out << kArchHeader << " " << kArchVersion << "\n";
  detail::write_cell(out, arch);
  return out.str();
}

inline std::string export_genotype(const Genotype& genotype) {
  std::ostringstream out;
  out << kArchHeader << " " << kArchVersion << "\n";
  detail::write_cell(out, genotype.normal);
  detail::write_cell(out, genotype.reduce);
  return out.str();
}

inline std::vector<DerivedArchitecture> import_cells(std::string_view text) { return detail::ArchParser(text).parse(); }

inline DerivedArchitecture import_arch(std::string_view text) {
  auto cells = import_cells(text);
  if (cells.size() != 1) throw ParseError("expected exactly one cell, found " + std::to_string(cells.size()), 1, 1);
  return cells.front();
}

inline Genotype import_genotype(std::string_view text) {
  auto cells = import_cells(text);
  Genotype g;
  bool normal = false, reduce = false;
  for (auto& c : cells) {
    bool& slot = c.kind == CellKind::Normal ? normal : reduce;
    if (slot) throw ParseError("duplicate " + std::string(to_string(c.kind)) + " cell", 1, 1);
    slot = true;
    (c.kind == CellKind::Normal ? g.normal : g.reduce) = std::move(c);
  }
  if (!normal || !reduce) throw ParseError("architecture file needs a normal and a reduce cell", 1, 1);
  return g;
}

}  // namespace stretchnas::derivation
