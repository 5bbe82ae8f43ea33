#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "stretchnas/autodiff/gradcheck.hpp"
#include "stretchnas/derivation/cost.hpp"
#include "stretchnas/derivation/network.hpp"
#include "stretchnas/search_space/supernet.hpp"

using namespace stretchnas;
using namespace stretchnas::search_space;
using ad::Real;
using topology::TopologyVariables;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<Real> v(ad::shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(dist(rng));
  return Tensor(std::move(shape), std::move(v));
}

void randomize(std::vector<Tensor> tensors, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  for (auto& t : tensors)
    for (auto& v : t.mutable_data()) v = static_cast<Real>(dist(rng));
}

// Max-shifted softmax written out on plain vectors.
std::vector<Real> plain_softmax(std::span<const Real> a) {
  const Real peak = *std::max_element(a.begin(), a.end());
  std::vector<Real> out(a.size());
  Real total = 0;
  for (std::size_t k = 0; k < a.size(); ++k) total += out[k] = std::exp(a[k] - peak);
  for (auto& v : out) v /= total;
  return out;
}

double max_abs_diff(std::span<const Real> a, std::span<const Real> b) {
  double m = 0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(static_cast<double>(a[k]) - b[k]));
  return m;
}

}  // namespace

TEST(MixedOp, UniformIdentitiesReturnInput) {
  Rng rng(1);
  std::vector<Operation> ops{Operation(OperationKind::Identity, 3, 1, rng), Operation(OperationKind::Identity, 3, 1, rng)};
  std::mt19937_64 g(2);
  Tensor x = random_tensor({2, 3, 4, 4}, g);
  Tensor y = mixed_op_forward(x, Tensor::zeros({2}), ops);
  EXPECT_LE(max_abs_diff(y.data(), x.data()), 1e-15);
}

TEST(MixedOp, SaturatedWeightSelectsFirstOp) {
  Rng rng(3);
  std::vector<Operation> ops;
  for (auto k : default_op_set()) ops.emplace_back(k, 3, 1, rng);
  std::mt19937_64 g(4);
  Tensor x = random_tensor({2, 3, 5, 5}, g);
  std::vector<Real> a(ops.size(), 0);
  a[0] = 1e6;
  Tensor y = mixed_op_forward(x, Tensor::vector(a), ops);
  Tensor first = ops[0].forward(x);
  for (std::size_t k = 0; k < y.numel(); ++k) EXPECT_NEAR(y[k], first[k], 1e-6 * std::max(1.0, std::abs(first[k])));
}

TEST(MixedOp, MatchesPerOpWeightedSum) {
  Rng rng(5);
  std::vector<Operation> ops;
  for (auto k : default_op_set()) ops.emplace_back(k, 4, 1, rng);
  std::mt19937_64 g(6);
  Tensor x = random_tensor({3, 4, 5, 5}, g);
  Tensor alpha = random_tensor({ops.size()}, g);
  Tensor y = mixed_op_forward(x, alpha, ops);

  // Direct exp-normalise without a shift.
  std::vector<double> p(ops.size());
  double total = 0;
  for (std::size_t k = 0; k < ops.size(); ++k) total += p[k] = std::exp(static_cast<double>(alpha[k]));
  std::vector<double> expected(x.numel(), 0.0);
  for (std::size_t k = 0; k < ops.size(); ++k) {
    Tensor o = ops[k].forward(x);
    for (std::size_t i = 0; i < expected.size(); ++i) expected[i] += p[k] / total * o[i];
  }
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(y[i], expected[i], 1e-12);
}

TEST(MixedOp, PermutingOpsWithAlphaIsInvariant) {
  Rng rng(7);
  std::vector<Operation> ops;
  for (auto k : default_op_set()) ops.emplace_back(k, 2, 1, rng);
  std::mt19937_64 g(8);
  Tensor x = random_tensor({2, 2, 4, 4}, g);
  Tensor alpha = random_tensor({ops.size()}, g);
  Tensor y = mixed_op_forward(x, alpha, ops);
  std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  std::vector<Operation> permuted;
  std::vector<Real> pa;
  for (auto k : perm) {
    permuted.push_back(ops[k]);
    pa.push_back(alpha[k]);
  }
  Tensor z = mixed_op_forward(x, Tensor::vector(pa), permuted);
  EXPECT_LE(max_abs_diff(y.data(), z.data()), 1e-12);
}

TEST(MixedOp, Errors) {
  Rng rng(9);
  std::vector<Operation> none;
  Tensor x = Tensor::zeros({1, 1, 2, 2});
  EXPECT_THROW(mixed_op_forward(x, Tensor::zeros({1}), none), ContractError);
  std::vector<Operation> one{Operation(OperationKind::Identity, 1, 1, rng)};
  EXPECT_THROW(mixed_op_forward(x, Tensor::zeros({2}), one), ContractError);
}

TEST(Operations, NamesRoundTrip) {
  for (const auto& [kind, name] : kOperationNames) EXPECT_EQ(parse_op(op_name(kind)), kind);
  EXPECT_THROW(parse_op("conv_7x7"), ConfigError);
  const auto defaults = default_op_set();
  EXPECT_EQ(std::count(defaults.begin(), defaults.end(), OperationKind::Zero), 0);
}

TEST(Operations, OutputShapes) {
  Rng rng(10);
  Tensor x = Tensor::full({2, 4, 7, 7}, 0.5);
  for (const auto& [kind, name] : kOperationNames) {
    for (std::size_t stride : {1, 2}) {
      Operation op(kind, 4, stride, rng);
      Tensor y = op.forward(x);
      const std::size_t side = stride == 1 ? 7 : 4;
      EXPECT_EQ(y.shape(), (Shape{2, 4, side, side})) << name << " stride " << stride;
    }
  }
}

namespace {

struct CellFixture {
  SearchCell cell;
  OperationVariables alpha;
  Tensor s0, s1;
};

CellFixture make_cell(int n_nodes, std::uint64_t seed, bool reduction = false) {
  Rng rng(seed);
  CellSpec spec{n_nodes, default_op_set(), reduction};
  CellFixture f{SearchCell(spec, 3, 3, 3, false, rng), OperationVariables(n_nodes, spec.ops.size()), {}, {}};
  std::mt19937_64 g(seed + 1);
  randomize(f.alpha.tensors(), g);
  f.s0 = random_tensor({2, 3, 4, 4}, g);
  f.s1 = random_tensor({2, 3, 4, 4}, g);
  return f;
}

}  // namespace

// Reference cell: x_j = sum_i sum_o softmax(alpha_ij)_o o(x_i), accumulated on
// plain vectors in the natural order.
TEST(CellForward, UnitFactorsAreBitIdenticalToReferenceCell) {
  for (bool reduction : {false, true}) {
    auto f = make_cell(5, 11, reduction);
    Tensor out = f.cell.forward(f.s0, f.s1, f.alpha, topology::unit_factors(5));

    auto [x1, x2] = f.cell.preprocess(f.s0, f.s1);
    std::vector<std::vector<Real>> states{x1.values(), x2.values()};
    std::vector<Shape> shapes{x1.shape(), x2.shape()};
    std::vector<Real> concat;
    for (int j = 3; j <= 5; ++j) {
      std::vector<Real> node;
      Shape node_shape;
      for (int i = 1; i < j; ++i) {
        const Edge e{i, j};
        const auto p = plain_softmax(f.alpha.edge(e).data());
        const Tensor input(shapes[static_cast<std::size_t>(i - 1)], states[static_cast<std::size_t>(i - 1)]);
        std::vector<Real> mixed;
        for (std::size_t o = 0; o < p.size(); ++o) {
          const Tensor y = f.cell.ops(e)[o].forward(input);
          if (o == 0) {
            mixed.resize(y.numel());
            for (std::size_t k = 0; k < y.numel(); ++k) mixed[k] = y[k] * p[o];
          } else {
            for (std::size_t k = 0; k < y.numel(); ++k) mixed[k] = mixed[k] + y[k] * p[o];
          }
          node_shape = y.shape();
        }
        if (node.empty()) node = mixed;
        else
          for (std::size_t k = 0; k < node.size(); ++k) node[k] = node[k] + mixed[k];
      }
      states.push_back(node);
      shapes.push_back(node_shape);
    }
    // Channel concat of nodes 3..5 per batch row.
    const std::size_t batch = shapes[2][0], per = states[2].size() / batch;
    for (std::size_t b = 0; b < batch; ++b)
      for (int j = 3; j <= 5; ++j) {
        const auto& s = states[static_cast<std::size_t>(j - 1)];
        concat.insert(concat.end(), s.begin() + static_cast<std::ptrdiff_t>(b * per),
                      s.begin() + static_cast<std::ptrdiff_t>((b + 1) * per));
      }
    ASSERT_EQ(out.numel(), concat.size());
    for (std::size_t k = 0; k < concat.size(); ++k) ASSERT_EQ(out[k], concat[k]) << "index " << k;
  }
}

TEST(CellForward, ZeroFactorsGiveZeroNodes) {
  auto f = make_cell(5, 12);
  topology::MergedFactors zeros;
  for (const auto& e : cell_edges(5)) zeros[e] = Tensor::scalar(0);
  Tensor out = f.cell.forward(f.s0, f.s1, f.alpha, zeros);
  for (Real v : out.data()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(out.shape(), (Shape{2, 9, 4, 4}));
}

TEST(CellForward, MissingFactorIsContractError) {
  auto f = make_cell(4, 13);
  auto factors = topology::unit_factors(4);
  factors.erase(Edge{2, 4});
  EXPECT_THROW(f.cell.forward(f.s0, f.s1, f.alpha, factors), ContractError);
}

// Unmerged form: each space member mixes its own edges, weighted by its own
// probability, summed over the space. Linear in the members, so it must equal
// the merged forward up to rounding.
TEST(CellForward, MergedEqualsPairwiseEnumeration) {
  using topology::TopologyMode;
  for (auto mode : {TopologyMode::InputPair, TopologyMode::OutputPair, TopologyMode::Arbitrary}) {
    for (int n : {4, 5, 6}) {
      auto f = make_cell(n, 100 + static_cast<std::uint64_t>(n));
      TopologyVariables beta(mode, n);
      std::mt19937_64 g(200 + static_cast<std::uint64_t>(n));
      randomize(beta.tensors(), g, 1.5);
      Tensor merged = f.cell.forward(f.s0, f.s1, f.alpha, topology::merge(beta));

      auto [x1, x2] = f.cell.preprocess(f.s0, f.s1);
      std::vector<std::vector<double>> states{{x1.values().begin(), x1.values().end()},
                                              {x2.values().begin(), x2.values().end()}};
      std::vector<Shape> shapes{x1.shape(), x2.shape()};
      auto mixed = [&](int i, int j) {
        Tensor in(shapes[static_cast<std::size_t>(i - 1)],
                  std::vector<Real>(states[static_cast<std::size_t>(i - 1)].begin(),
                                    states[static_cast<std::size_t>(i - 1)].end()));
        return mixed_op_forward(in, f.alpha.edge({i, j}), f.cell.ops({i, j}));
      };
      for (int j = 3; j <= n; ++j) {
        std::vector<double> node(x1.numel(), 0.0);
        auto accumulate = [&](double weight, const Tensor& y) {
          for (std::size_t k = 0; k < node.size(); ++k) node[k] += weight * y[k];
        };
        if (mode == TopologyMode::InputPair) {
          const auto p = plain_softmax(beta.node(j).data());
          const auto pairs = topology::enumerate_input_pairs(j, n);
          for (std::size_t k = 0; k < pairs.size(); ++k) {
            accumulate(p[k], mixed(pairs[k].first, j));
            accumulate(p[k], mixed(pairs[k].second, j));
          }
        } else {
          for (int i = 1; i < j; ++i) {
            const int posterior = n - i;
            if (mode == TopologyMode::OutputPair) {
              if (posterior == 1) {
                accumulate(1.0, mixed(i, j));
                continue;
              }
              const auto p = plain_softmax(beta.node(i).data());
              const auto pairs = topology::enumerate_output_pairs(i, n);
              const double scale = static_cast<double>(posterior * (posterior - 1) / 2) / (posterior - 1);
              for (std::size_t k = 0; k < pairs.size(); ++k)
                if (pairs[k].first == j || pairs[k].second == j) accumulate(scale * p[k], mixed(i, j));
            } else {
              const auto p = plain_softmax(beta.node(i).data());
              const auto codes = topology::enumerate_codes(i, n);
              const double scale = (std::pow(2.0, posterior) - 1) / std::pow(2.0, posterior - 1);
              for (std::size_t k = 0; k < codes.size(); ++k)
                if (codes[k].connects(i, j)) accumulate(scale * p[k], mixed(i, j));
            }
          }
        }
        states.push_back(node);
        shapes.push_back(x1.shape());
      }
      const std::size_t batch = x1.size(0), per = x1.numel() / batch;
      std::size_t idx = 0;
      double worst = 0;
      for (std::size_t b = 0; b < batch; ++b)
        for (int j = 3; j <= n; ++j)
          for (std::size_t k = 0; k < per; ++k)
            worst = std::max(worst, std::abs(merged[idx++] - states[static_cast<std::size_t>(j - 1)][b * per + k]));
      EXPECT_LE(worst, 1e-9) << topology::to_string(mode) << " N=" << n;
    }
  }
}

namespace {

SupernetConfig small_config(int layers, int n_nodes) {
  SupernetConfig c;
  c.layers = layers;
  c.n_nodes = n_nodes;
  c.init_channels = 4;
  c.reduction_positions = default_reduction_positions(layers);
  c.input_shape = {2, 3, 3};
  return c;
}

Tensor sample_batch(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  return random_tensor({n, 2, 3, 3}, g);
}

std::vector<int> alternating_labels(std::size_t n) {
  std::vector<int> y(n);
  for (std::size_t k = 0; k < n; ++k) y[k] = static_cast<int>(k % 2);
  return y;
}

}  // namespace

TEST(Supernet, LogitShape) {
  Rng rng(20);
  auto config = small_config(2, 4);
  Supernet net(config, rng);
  auto arch = ArchitectureVariables::zeros(config);
  Tensor logits = net.forward(sample_batch(8, 21), arch);
  EXPECT_EQ(logits.shape(), (Shape{8, 2}));
}

TEST(Supernet, ReductionLayout) {
  EXPECT_EQ(default_reduction_positions(8), (std::set<int>{2, 5}));
  EXPECT_EQ(default_reduction_positions(3), (std::set<int>{1, 2}));
  EXPECT_EQ(default_reduction_positions(2), (std::set<int>{1}));
  Rng rng(22);
  auto config = small_config(3, 4);
  Supernet net(config, rng);
  ASSERT_EQ(net.cells().size(), 3u);
  EXPECT_FALSE(net.cells()[0].spec().reduction);
  EXPECT_TRUE(net.cells()[1].spec().reduction);
  EXPECT_EQ(net.cells()[1].channels(), 8u);
  EXPECT_EQ(net.cells()[2].channels(), 16u);
}

TEST(Supernet, IdenticalRowsGiveIdenticalLogits) {
  Rng rng(23);
  auto config = small_config(2, 5);
  Supernet net(config, rng);
  auto arch = ArchitectureVariables::zeros(config);
  std::mt19937_64 g(24);
  Tensor row = random_tensor({1, 2, 3, 3}, g);
  std::vector<Real> data;
  for (int k = 0; k < 4; ++k) data.insert(data.end(), row.data().begin(), row.data().end());
  // Batch statistics of identical rows have zero variance; outputs are still
  // defined and identical across rows.
  Tensor logits = net.forward(Tensor({4, 2, 3, 3}, data), arch);
  for (std::size_t r = 1; r < 4; ++r)
    for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(logits[r * 2 + c], logits[c]);
}

TEST(Supernet, ShapeMismatchIsShapeError) {
  Rng rng(25);
  auto config = small_config(1, 4);
  Supernet net(config, rng);
  auto arch = ArchitectureVariables::zeros(config);
  EXPECT_THROW(net.forward(Tensor::zeros({2, 3, 3, 3}), arch), ShapeError);
  EXPECT_THROW(net.forward(Tensor::zeros({2, 2, 4, 3}), arch), ShapeError);
}

TEST(Supernet, SmallWeightStepDecreasesLoss) {
  Rng rng(26);
  auto config = small_config(2, 4);
  Supernet net(config, rng);
  auto arch = ArchitectureVariables::zeros(config);
  Tensor x = sample_batch(8, 27);
  auto y = alternating_labels(8);
  auto params = net.parameters();
  double before = 0;
  ad::Gradients grads;
  {
    ad::Tape tape;
    ad::TapeScope scope(tape);
    Tensor loss = ad::cross_entropy(net.forward(x, arch), y);
    before = loss.item();
    grads = ad::backward(tape, loss);
  }
  for (auto& p : params) {
    auto g = grads.raw(p);
    auto w = p.mutable_data();
    for (std::size_t i = 0; i < g.size(); ++i) w[i] -= static_cast<Real>(1e-4 * g[i]);
  }
  ad::NoGradScope no_grad;
  const double after = ad::cross_entropy(net.forward(x, arch), y).item();
  EXPECT_LT(after, before);
}

TEST(Supernet, ParameterNamesAreUnique) {
  Rng rng(28);
  Supernet net(small_config(2, 5), rng);
  auto named = net.named_parameters();
  std::set<std::string> names;
  for (const auto& [n, t] : named) EXPECT_TRUE(names.insert(n).second) << n;
}

TEST(Supernet, DartsBaselineUsesUnitFactors) {
  Rng rng(29);
  auto config = small_config(1, 4);
  config.topology_mode = std::nullopt;
  config.ops.push_back(OperationKind::Zero);
  Supernet net(config, rng);
  auto arch = ArchitectureVariables::zeros(config);
  EXPECT_FALSE(arch.beta_normal.has_value());
  for (const auto& [e, s] : arch.factors(false)) EXPECT_EQ(s.item(), 1.0);
  EXPECT_EQ(arch.regularizer().item(), 0.0);
  EXPECT_EQ(net.forward(sample_batch(4, 30), arch).shape(), (Shape{4, 2}));
}

// d(L_task + 10 r) with respect to weights, alpha and beta on an N=5, L=1
// supernet in Arbitrary mode.
TEST(Supernet, GradcheckWeightsAlphaBeta) {
  Rng rng(31);
  auto config = small_config(1, 5);
  config.init_channels = 3;
  Supernet net(config, rng);
  auto arch = ArchitectureVariables::zeros(config);
  std::mt19937_64 g(32);
  randomize(arch.alpha_tensors(), g, 0.5);
  randomize(arch.beta_tensors(), g, 1.0);
  Tensor x = sample_batch(6, 33);
  auto y = alternating_labels(6);
  auto loss = [&] {
    return topology::loss_with_regularizer(ad::cross_entropy(net.forward(x, arch), y), arch.regularizer(), 10.0);
  };
  std::vector<std::pair<std::string, Tensor>> arch_params = arch.named();
  auto report = ad::gradcheck_tensors(loss, arch_params, 1e-6, 1e-4);
  EXPECT_TRUE(report.passed) << report.max_rel_error << " at " << report.worst;
  auto weights = net.named_parameters();
  auto wreport = ad::gradcheck_tensors(loss, weights, 1e-6, 1e-4, 7);
  EXPECT_TRUE(wreport.passed) << wreport.max_rel_error << " at " << wreport.worst;
}

TEST(Cost, SingleConvEdgeClosedForm) {
  const auto c = derivation::op_cost(OperationKind::Conv3x3, 4, 1, 8, 8);
  const std::uint64_t weights = 4 * 4 * 3 * 3;
  EXPECT_EQ(c.params, weights + 2 * 4);  // batch-norm affine in place of a bias
  EXPECT_EQ(c.flops, 2 * weights * 64);
  EXPECT_EQ(derivation::op_cost(OperationKind::Identity, 4, 1, 8, 8), (derivation::Cost{0, 0}));
  EXPECT_EQ(derivation::op_cost(OperationKind::MaxPool3x3, 4, 2, 8, 8).params, 0u);
}

TEST(Cost, OpCostMatchesInstantiatedParameters) {
  Rng rng(40);
  for (const auto& [kind, name] : kOperationNames) {
    for (std::size_t stride : {1, 2}) {
      Operation op(kind, 5, stride, rng);
      std::uint64_t numel = 0;
      for (const auto& p : op.params()) numel += p.numel();
      EXPECT_EQ(derivation::op_cost(kind, 5, stride, 6, 6).params, numel) << name << " stride " << stride;
    }
  }
}

namespace {

derivation::DerivedArchitecture chain_cell(int n, OperationKind op, derivation::CellKind kind) {
  derivation::DerivedArchitecture a;
  a.n_nodes = n;
  a.removed.assign(static_cast<std::size_t>(n), false);
  a.kind = kind;
  a.edges.push_back({{1, 3}, op});
  a.edges.push_back({{2, 3}, op});
  for (int j = 4; j <= n; ++j) a.edges.push_back({{j - 1, j}, op});
  return a;
}

}  // namespace

TEST(Cost, IdentityCellHasNoEdgeParameters) {
  auto cell = chain_cell(5, OperationKind::Identity, derivation::CellKind::Normal);
  EXPECT_EQ(derivation::cell_cost(cell, 4, 4, 4, false, 8, 8), derivation::cell_cost(
      derivation::DerivedArchitecture{5, {}, std::vector<bool>(5, false), derivation::CellKind::Normal, {}}, 4, 4, 4,
      false, 8, 8));
}

TEST(Cost, NetworkCountMatchesInstantiatedNetwork) {
  std::mt19937_64 g(41);
  const auto ops = default_op_set();
  for (int trial = 0; trial < 10; ++trial) {
    derivation::Genotype genotype{chain_cell(5, ops[g() % ops.size()], derivation::CellKind::Normal),
                                  chain_cell(5, ops[g() % ops.size()], derivation::CellKind::Reduction)};
    for (auto* cell : {&genotype.normal, &genotype.reduce})
      for (auto& e : cell->edges) e.op = ops[g() % ops.size()];
    auto config = small_config(3, 5);
    config.input_shape = {3, 6, 6};
    Rng rng(static_cast<std::uint64_t>(trial));
    derivation::EvalNetwork net(genotype, config, rng);
    const auto cost = derivation::count_params_flops(genotype, config);
    EXPECT_EQ(cost.params, net.parameter_count());
    EXPECT_EQ(cost, derivation::count_params_flops(genotype, config));
    EXPECT_GT(cost.flops, 0u);
  }
}
