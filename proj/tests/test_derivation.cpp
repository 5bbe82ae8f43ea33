#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "stretchnas/data/synthetic.hpp"
#include "stretchnas/derivation/decode.hpp"
#include "stretchnas/derivation/io.hpp"
#include "stretchnas/derivation/retrain.hpp"

using namespace stretchnas;
using namespace stretchnas::derivation;
using search_space::default_op_set;
using topology::TopologyMode;

namespace {

void randomize(std::vector<ad::Tensor> tensors, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  for (auto& t : tensors)
    for (auto& v : t.mutable_data()) v = static_cast<ad::Real>(dist(rng));
}

// Sets node k's scores to +10 at index choice[k-1], 0 elsewhere.
TopologyVariables peaked(TopologyMode mode, int n, const std::vector<std::size_t>& choice) {
  TopologyVariables beta(mode, n);
  for (int k = 1; k <= n; ++k)
    if (beta.has(k)) beta.node(k).mutable_data()[choice.at(static_cast<std::size_t>(k - 1))] = 10;
  return beta;
}

// Starved nodes by in-degree over an adjacency matrix of kept nodes.
std::vector<int> starved_by_indegree(const DerivedArchitecture& a) {
  const int n = a.n_nodes;
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(n + 1), std::vector<int>(static_cast<std::size_t>(n + 1), 0));
  for (const auto& e : a.edges) adj[static_cast<std::size_t>(e.edge.from)][static_cast<std::size_t>(e.edge.to)] = 1;
  auto kept = [&](int v) { return v <= 2 || !a.removed[static_cast<std::size_t>(v - 1)]; };
  std::vector<int> out;
  for (int j = 3; j <= n; ++j) {
    if (!kept(j)) continue;
    int indegree = 0;
    for (int i = 1; i < j; ++i)
      if (kept(i)) indegree += adj[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    if (indegree == 0) out.push_back(j);
  }
  return out;
}

DerivedArchitecture random_arch(std::mt19937_64& g, bool force_valid) {
  const auto ops = default_op_set();
  DerivedArchitecture a;
  a.n_nodes = 4 + static_cast<int>(g() % 4);
  a.removed.assign(static_cast<std::size_t>(a.n_nodes), false);
  a.kind = g() % 2 ? CellKind::Normal : CellKind::Reduction;
  a.provenance = {1 + static_cast<int>(g() % 8), "h" + std::to_string(g() % 100000), static_cast<int>(g() % 50)};
  for (int j = 3; j <= a.n_nodes; ++j) {
    if (j < a.n_nodes && g() % 4 == 0) a.removed[static_cast<std::size_t>(j - 1)] = true;
    for (int i = 1; i < j; ++i)
      if (g() % 3 == 0) a.edges.push_back({{i, j}, ops[g() % ops.size()]});
    if (force_valid && !a.removed[static_cast<std::size_t>(j - 1)]) {
      const bool fed = std::any_of(a.edges.begin(), a.edges.end(), [&](const ArchEdge& e) {
        return e.edge.to == j && (e.edge.from <= 2 || !a.removed[static_cast<std::size_t>(e.edge.from - 1)]);
      });
      if (!fed) a.edges.push_back({{1 + static_cast<int>(g() % 2), j}, ops[g() % ops.size()]});
    }
  }
  a.sort_edges();
  return a;
}

}  // namespace

TEST(DecodeTopology, UniformArbitraryTiesToEmptyCodes) {
  TopologyVariables beta(TopologyMode::Arbitrary, 5);
  auto d = decode_topology(beta);
  EXPECT_TRUE(d.edges.empty());
  for (int k = 1; k <= 5; ++k) EXPECT_EQ(d.choice[static_cast<std::size_t>(k - 1)], 0u);
  EXPECT_EQ(d.removed, (std::vector<bool>{false, false, true, true, false}));
}

TEST(DecodeTopology, PeakedCodesGiveTheirEdges) {
  // N=5; node 1 code 0b0110 over (2,3,4,5) -> edges (1,3),(1,4);
  // node 2 code 0b100 -> (2,3); node 3 code 0b11 -> (3,4),(3,5); node 4 code 1.
  auto beta = peaked(TopologyMode::Arbitrary, 5, {6, 4, 3, 1, 0});
  auto d = decode_topology(beta);
  EXPECT_EQ(d.edges, (std::vector<Edge>{{1, 3}, {2, 3}, {1, 4}, {3, 4}, {3, 5}, {4, 5}}));
  EXPECT_EQ(d.removed, std::vector<bool>(5, false));
}

TEST(DecodeTopology, AllZeroCodeRemovesNode) {
  auto beta = peaked(TopologyMode::Arbitrary, 5, {15, 7, 0, 1, 0});
  auto d = decode_topology(beta);
  EXPECT_TRUE(d.removed[2]);
  EXPECT_FALSE(d.removed[3]);
}

TEST(DecodeTopology, InputPairsGiveTwoInputsPerNode) {
  std::mt19937_64 g(1);
  for (int n = 4; n <= 7; ++n) {
    TopologyVariables beta(TopologyMode::InputPair, n);
    randomize(beta.tensors(), g);
    auto d = decode_topology(beta);
    EXPECT_EQ(d.edges.size(), static_cast<std::size_t>(2 * (n - 2)));
    for (int j = 3; j <= n; ++j)
      EXPECT_EQ(std::count_if(d.edges.begin(), d.edges.end(), [&](const Edge& e) { return e.to == j; }), 2);
  }
  // Four intermediate nodes: the DARTS edge budget of 8.
  TopologyVariables beta(TopologyMode::InputPair, 6);
  EXPECT_EQ(decode_topology(beta).edges.size(), 8u);
}

TEST(DecodeTopology, OutputPairsGiveTwoOutputsPerEligibleNode) {
  std::mt19937_64 g(2);
  for (int n = 4; n <= 7; ++n) {
    for (int trial = 0; trial < 20; ++trial) {
      TopologyVariables beta(TopologyMode::OutputPair, n);
      randomize(beta.tensors(), g);
      auto d = decode_topology(beta);
      for (int i = 1; i < n; ++i) {
        const auto out = std::count_if(d.edges.begin(), d.edges.end(), [&](const Edge& e) { return e.from == i; });
        const auto pair = topology::enumerate_output_pairs(i, n);
        if (pair.empty()) {
          EXPECT_EQ(out, 1);
          continue;
        }
        // The edge (1,2) into an input node carries nothing.
        const auto chosen = pair[d.choice[static_cast<std::size_t>(i - 1)]];
        EXPECT_EQ(out, i == 1 && chosen.first == 2 ? 1 : 2);
      }
    }
  }
}

TEST(DecodeTopology, ShiftInvariance) {
  std::mt19937_64 g(3);
  for (auto mode : {TopologyMode::InputPair, TopologyMode::OutputPair, TopologyMode::Arbitrary}) {
    for (int trial = 0; trial < 100; ++trial) {
      const int n = 4 + trial % 3;
      TopologyVariables beta(mode, n);
      randomize(beta.tensors(), g, 2.0);
      const auto before = decode_topology(beta);
      std::uniform_real_distribution<double> shift(-50, 50);
      for (auto& t : beta.tensors()) {
        const double c = shift(g);
        for (auto& v : t.mutable_data()) v = static_cast<ad::Real>(v + c);
      }
      const auto after = decode_topology(beta);
      EXPECT_EQ(before.edges, after.edges);
      EXPECT_EQ(before.removed, after.removed);
    }
  }
}

TEST(DecodeTopology, TiesResolveToLowestIndex) {
  TopologyVariables beta(TopologyMode::Arbitrary, 5);
  beta.node(1).mutable_data()[5] = 3;
  beta.node(1).mutable_data()[9] = 3;
  EXPECT_EQ(decode_topology(beta).choice[0], 5u);
  TopologyVariables pairs(TopologyMode::InputPair, 5);
  pairs.node(5).mutable_data()[2] = 1;
  pairs.node(5).mutable_data()[4] = 1;
  EXPECT_EQ(decode_topology(pairs).choice[4], 2u);
}

TEST(DecodeOperations, OneHotAndPermutation) {
  const auto ops = default_op_set();
  OperationVariables alpha(5, ops.size());
  std::mt19937_64 g(4);
  std::vector<std::size_t> pick;
  for (auto& t : alpha.tensors()) {
    pick.push_back(g() % ops.size());
    t.mutable_data()[pick.back()] = 1;
  }
  const auto edges = cell_edges(5);
  const std::vector<Edge> kept{edges[0], edges[3], edges[7]};
  auto chosen = decode_operations(alpha, kept, ops);
  ASSERT_EQ(chosen.size(), kept.size());
  for (std::size_t k = 0; k < kept.size(); ++k) {
    EXPECT_EQ(chosen[k].edge, kept[k]);
    EXPECT_EQ(chosen[k].op, ops[pick[edge_index(kept[k])]]);
  }
  // Permute the op list and every alpha vector the same way.
  const std::vector<std::size_t> perm{5, 3, 1, 0, 2, 4};
  std::vector<search_space::OperationKind> permuted_ops;
  for (auto p : perm) permuted_ops.push_back(ops[p]);
  OperationVariables permuted(5, ops.size());
  for (std::size_t e = 0; e < edges.size(); ++e)
    for (std::size_t k = 0; k < perm.size(); ++k)
      permuted.tensors()[e].mutable_data()[k] = alpha.tensors()[e][perm[k]];
  auto again = decode_operations(permuted, kept, permuted_ops);
  EXPECT_EQ(again, chosen);
}

TEST(Validate, Examples) {
  // DARTS-style: every intermediate node has two inputs.
  DerivedArchitecture darts{6, {}, std::vector<bool>(6, false), CellKind::Normal, {}};
  for (int j = 3; j <= 6; ++j) {
    darts.edges.push_back({{j - 2, j}, search_space::OperationKind::SepConv3x3});
    darts.edges.push_back({{j - 1, j}, search_space::OperationKind::Identity});
  }
  darts.sort_edges();
  EXPECT_TRUE(validate(darts).valid);

  DerivedArchitecture starved{5, {{{1, 3}, search_space::OperationKind::Identity},
                                  {{3, 4}, search_space::OperationKind::Identity},
                                  {{2, 5}, search_space::OperationKind::Identity}},
                              {false, false, true, false, false}, CellKind::Normal, {}};
  auto report = validate(starved);
  EXPECT_FALSE(report.valid);
  EXPECT_EQ(report.starved, (std::vector<int>{4}));
  EXPECT_EQ(report.starved, starved_by_indegree(starved));

  DerivedArchitecture empty{5, {}, {false, false, true, true, true}, CellKind::Normal, {}};
  auto e = validate(empty);
  EXPECT_FALSE(e.valid);
  EXPECT_TRUE(e.empty_cell);
  EXPECT_NE(e.summary().find("empty cell"), std::string::npos);
}

TEST(Validate, AgreesWithIndegreeCheck) {
  std::mt19937_64 g(5);
  for (int trial = 0; trial < 500; ++trial) {
    auto a = random_arch(g, false);
    auto report = validate(a);
    EXPECT_EQ(report.starved, starved_by_indegree(a));
    EXPECT_EQ(report.valid, report.starved.empty() && !a.kept_intermediate_nodes().empty());
  }
}

// Exhaustive over per-node argmax codes: r(beta) is zero exactly when the
// decoded cell has no starved node.
TEST(RegularizerDecode, ExhaustiveAgreementN4N5) {
  for (int n : {4, 5}) {
    std::vector<std::size_t> sizes;
    for (int k = 1; k <= n; ++k) sizes.push_back(std::size_t{1} << (n - k));
    std::vector<std::size_t> choice(static_cast<std::size_t>(n), 0);
    std::size_t combos = 0;
    while (true) {
      auto beta = peaked(TopologyMode::Arbitrary, n, choice);
      const double r = topology::regularizer(beta).item();
      const auto d = decode_topology(beta);
      DerivedArchitecture a{n, {}, d.removed, CellKind::Normal, {}};
      for (const auto& e : d.edges) a.edges.push_back({e, search_space::OperationKind::Identity});
      const bool no_starved = validate(a).starved.empty();
      EXPECT_EQ(r == 0.0, no_starved) << "n=" << n << " combo " << combos;
      ++combos;
      std::size_t k = 0;
      while (k < choice.size() && ++choice[k] == sizes[k]) choice[k++] = 0;
      if (k == choice.size()) break;
    }
    EXPECT_EQ(combos, n == 4 ? 64u : 1024u);
  }
}

TEST(HandCraftedTop2, TwoCandidatesBothKept) {
  auto ops = default_op_set();
  ops.push_back(search_space::OperationKind::Zero);
  OperationVariables alpha(4, ops.size());
  auto a = hand_crafted_top2_decode(alpha, ops, CellKind::Normal, {});
  EXPECT_EQ(std::count_if(a.edges.begin(), a.edges.end(), [](const ArchEdge& e) { return e.edge.to == 3; }), 2);
}

TEST(HandCraftedTop2, MatchesBruteForceRanking) {
  auto ops = default_op_set();
  ops.insert(ops.begin() + 2, search_space::OperationKind::Zero);
  std::mt19937_64 g(6);
  for (int trial = 0; trial < 50; ++trial) {
    OperationVariables alpha(6, ops.size());
    randomize(alpha.tensors(), g, 2.0);
    auto a = hand_crafted_top2_decode(alpha, ops, CellKind::Normal, {});
    for (int j = 3; j <= 6; ++j) {
      std::vector<std::tuple<double, int, search_space::OperationKind>> ranked;
      for (int i = 1; i < j; ++i) {
        auto v = alpha.edge({i, j}).values();
        double total = 0;
        for (auto x : v) total += std::exp(static_cast<double>(x));
        double best = -1;
        search_space::OperationKind op{};
        for (std::size_t k = 0; k < ops.size(); ++k) {
          if (ops[k] == search_space::OperationKind::Zero) continue;
          const double p = std::exp(static_cast<double>(v[k])) / total;
          if (p > best) {
            best = p;
            op = ops[k];
          }
        }
        ranked.emplace_back(-best, i, op);
      }
      std::sort(ranked.begin(), ranked.end());
      std::vector<ArchEdge> expected{{{std::get<1>(ranked[0]), j}, std::get<2>(ranked[0])},
                                     {{std::get<1>(ranked[1]), j}, std::get<2>(ranked[1])}};
      std::vector<ArchEdge> got;
      for (const auto& e : a.edges)
        if (e.edge.to == j) got.push_back(e);
      std::sort(expected.begin(), expected.end(), [](auto& x, auto& y) { return x.edge < y.edge; });
      ASSERT_EQ(got.size(), 2u);
      EXPECT_EQ(got, expected);
      for (const auto& e : got) EXPECT_NE(e.op, search_space::OperationKind::Zero);
    }
  }
}

TEST(Repair, AddsMostProbableInput) {
  const auto ops = default_op_set();
  // Node 5 starved: nobody's code has bit 5; node 3 prefers (3,5) the most
  // among the remaining mass.
  auto beta = peaked(TopologyMode::Arbitrary, 5, {0b0110, 0b100, 0b10, 0, 0});
  beta.node(3).mutable_data()[1] = 9;  // code 01: edge (3,5)
  OperationVariables alpha(5, ops.size());
  alpha.edge({3, 5}).mutable_data()[2] = 4;
  auto arch = derive_cell(alpha, beta, ops, CellKind::Normal, {});
  ASSERT_EQ(validate(arch).starved, (std::vector<int>{5}));
  auto fixed = repair(arch, alpha, beta, ops);
  EXPECT_TRUE(validate(fixed).valid);
  EXPECT_EQ(fixed.edges.size(), arch.edges.size() + 1);
  EXPECT_NE(std::find(fixed.edges.begin(), fixed.edges.end(), ArchEdge{{3, 5}, ops[2]}), fixed.edges.end());
}

TEST(Depth, ChainOfFourNodes) {
  DerivedArchitecture chain{6, {}, std::vector<bool>(6, false), CellKind::Normal, {}};
  chain.edges = {{{1, 3}, {}}, {{3, 4}, {}}, {{4, 5}, {}}, {{5, 6}, {}}};
  EXPECT_EQ(cell_depth(chain), 4);
  DerivedArchitecture flat{6, {}, std::vector<bool>(6, false), CellKind::Normal, {}};
  for (int j = 3; j <= 6; ++j) flat.edges.push_back({{1, j}, {}});
  EXPECT_EQ(cell_depth(flat), 1);
}

TEST(ExportDot, SingleEdgeCell) {
  DerivedArchitecture a{4, {{{1, 3}, search_space::OperationKind::SepConv3x3}}, {false, false, false, true},
                        CellKind::Normal, {}};
  const std::string dot = export_dot(a);
  std::vector<std::string> lines;
  std::istringstream in(dot);
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  ASSERT_EQ(lines.size(), 5u);
  EXPECT_EQ(lines.front(), "digraph normal {");
  EXPECT_EQ(lines[1], "  rankdir=LR;");
  EXPECT_EQ(lines[2], "  \"c_{k-2}\" -> \"3\" [label=\"sep_conv_3x3\"];");
  EXPECT_EQ(lines[3], "  \"3\" -> \"out\";");
  EXPECT_EQ(lines.back(), "}");
}

TEST(ArchFile, RoundTripRandomInstances) {
  std::mt19937_64 g(7);
  for (int trial = 0; trial < 200; ++trial) {
    auto a = random_arch(g, trial % 2 == 0);
    EXPECT_EQ(import_arch(export_arch(a)), a);
    auto b = random_arch(g, true);
    b.kind = CellKind::Reduction;
    a.kind = CellKind::Normal;
    Genotype genotype{a, b};
    EXPECT_EQ(import_genotype(export_genotype(genotype)), genotype);
  }
}

TEST(ArchFile, ParseErrors) {
  const std::string good =
      "stretchnas-architecture 1\ncell normal\nnodes 4\nlayers 2\nconfig_hash abc\nepoch 3\nremoved\n"
      "edge 1 3 identity\nedge 3 4 avg_pool_3x3\nend\n";
  EXPECT_NO_THROW(import_arch(good));

  auto error_of = [](const std::string& text) -> std::optional<ParseError> {
    try {
      import_arch(text);
    } catch (const ParseError& e) {
      return e;
    }
    return std::nullopt;
  };
  auto reversed = good;
  reversed.replace(reversed.find("edge 3 4"), 8, "edge 4 3");
  auto e = error_of(reversed);
  ASSERT_TRUE(e);
  EXPECT_NE(std::string(e->what()).find("non-topological edge"), std::string::npos);
  EXPECT_EQ(e->line(), 9u);
  EXPECT_EQ(e->column(), 6u);

  auto bad_op = good;
  bad_op.replace(bad_op.find("avg_pool_3x3"), 12, "avg_pool_9x9");
  e = error_of(bad_op);
  ASSERT_TRUE(e);
  EXPECT_EQ(e->line(), 9u);
  EXPECT_EQ(e->column(), 10u);

  EXPECT_TRUE(error_of("stretchnas-architecture 2\n"));
  EXPECT_TRUE(error_of(good.substr(0, good.size() - 4)));
  EXPECT_TRUE(error_of("garbage\n"));
  EXPECT_TRUE(error_of(good + good.substr(good.find("cell"))));  // two cells for a single-cell import
  auto unknown = good;
  unknown.replace(unknown.find("epoch"), 5, "epoxy");
  e = error_of(unknown);
  ASSERT_TRUE(e);
  EXPECT_EQ(e->line(), 6u);
}

namespace {

optimization::Dataset blobs(std::size_t n, std::uint64_t seed) {
  data::SyntheticSpec spec;
  spec.generator = data::Generator::GaussianBlobs;
  spec.n_samples = n;
  spec.noise = 0.3;
  return data::generate(spec, seed);
}

Genotype identity_genotype(int layers) {
  DerivedArchitecture cell{4, {{{1, 3}, search_space::OperationKind::Identity},
                               {{2, 3}, search_space::OperationKind::Identity},
                               {{3, 4}, search_space::OperationKind::Identity}},
                           std::vector<bool>(4, false), CellKind::Normal, {layers, "test", 0}};
  DerivedArchitecture reduce = cell;
  reduce.kind = CellKind::Reduction;
  return {cell, reduce};
}

search_space::SupernetConfig point_config(int layers) {
  search_space::SupernetConfig c;
  c.layers = layers;
  c.n_nodes = 4;
  c.reduction_positions = search_space::default_reduction_positions(layers);
  return c;
}

}  // namespace

TEST(Retrain, IdentityCellSeparatesBlobs) {
  RetrainOptions options;
  options.epochs = 5;
  options.seed = 3;
  auto result = retrain_from_scratch(identity_genotype(2), point_config(2), blobs(600, 1), blobs(400, 2), options);
  EXPECT_GE(result.test_accuracy, 0.99);
  EXPECT_EQ(result.epoch_losses.size(), 5u);
  EXPECT_EQ(result.depth_normal, 2);
}

TEST(Retrain, ZeroEpochsIsUntrained) {
  RetrainOptions options;
  options.epochs = 0;
  auto result = retrain_from_scratch(identity_genotype(2), point_config(2), blobs(200, 1), blobs(1000, 2), options);
  EXPECT_TRUE(result.epoch_losses.empty());
  EXPECT_GE(result.test_accuracy, 0.0);
  EXPECT_LE(result.test_accuracy, 1.0);
}

TEST(Retrain, DeterministicForSeed) {
  RetrainOptions options;
  options.epochs = 2;
  options.seed = 9;
  auto a = retrain_from_scratch(identity_genotype(2), point_config(2), blobs(300, 1), blobs(300, 2), options);
  auto b = retrain_from_scratch(identity_genotype(2), point_config(2), blobs(300, 1), blobs(300, 2), options);
  EXPECT_EQ(a.test_accuracy, b.test_accuracy);
  EXPECT_EQ(a.epoch_losses, b.epoch_losses);
}

TEST(Retrain, LayerMismatchIsRejectedUnlessForced) {
  RetrainOptions options;
  options.epochs = 1;
  EXPECT_THROW(retrain_from_scratch(identity_genotype(2), point_config(3), blobs(100, 1), blobs(100, 2), options),
               ConsistencyError);
  options.force = true;
  EXPECT_NO_THROW(retrain_from_scratch(identity_genotype(2), point_config(3), blobs(100, 1), blobs(100, 2), options));
}

TEST(EvalNetwork, RemovedNodesArePruned) {
  DerivedArchitecture cell{5, {{{1, 3}, search_space::OperationKind::SepConv3x3},
                               {{2, 4}, search_space::OperationKind::SepConv3x3},
                               {{1, 5}, search_space::OperationKind::Identity}},
                           {false, false, false, true, false}, CellKind::Normal, {1, "t", 0}};
  DerivedArchitecture reduce = cell;
  reduce.kind = CellKind::Reduction;
  auto config = point_config(1);
  config.n_nodes = 5;
  config.reduction_positions = {};
  search_space::Rng rng(1);
  EvalNetwork net({cell, reduce}, config, rng);
  for (const auto& [name, t] : net.named_parameters()) EXPECT_EQ(name.find("e2_4"), std::string::npos) << name;
  // Two kept nodes of 8 channels feed the classifier.
  auto named = net.named_parameters();
  auto w = std::find_if(named.begin(), named.end(), [](auto& p) { return p.first == "classifier.w"; });
  ASSERT_NE(w, named.end());
  EXPECT_EQ(w->second.size(0), 16u);
  EXPECT_EQ(count_params_flops({cell, reduce}, config).params, net.parameter_count());
}

TEST(EvalNetwork, InvalidCellIsRejected) {
  DerivedArchitecture cell{4, {{{1, 3}, search_space::OperationKind::Identity}}, std::vector<bool>(4, false),
                           CellKind::Normal, {}};
  search_space::Rng rng(1);
  EXPECT_THROW(EvalNetwork({cell, cell}, point_config(1), rng), ContractError);
}
