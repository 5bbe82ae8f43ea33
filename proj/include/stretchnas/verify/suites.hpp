#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "stretchnas/autodiff/gradcheck.hpp"
#include "stretchnas/derivation/decode.hpp"
#include "stretchnas/search_space/supernet.hpp"
#include "stretchnas/topology/regularizer.hpp"

namespace stretchnas::verify {

using ad::Real;
using ad::Tensor;
using topology::TopologyMode;
using topology::TopologyVariables;

enum class Suite { Gradcheck, Oracle, Regularizer, Spaces };

inline std::string_view to_string(Suite s) {
  switch (s) {
    case Suite::Gradcheck: return "gradcheck";
    case Suite::Oracle: return "oracle";
    case Suite::Regularizer: return "regularizer";
    case Suite::Spaces: return "spaces";
  }
  return "?";
}

inline Suite parse_suite(std::string_view name) {
  for (auto s : {Suite::Gradcheck, Suite::Oracle, Suite::Regularizer, Suite::Spaces})
    if (to_string(s) == name) return s;
  throw ConfigError("unknown verify suite '" + std::string(name) + "' (expected gradcheck, oracle, regularizer or spaces)");
}

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0;
};

struct SuiteReport {
  Suite suite = Suite::Spaces;
  std::vector<CheckResult> checks;

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
  }
};

using Check = std::function<CheckResult()>;

// STRETCHNAS_THREADS if set to a positive integer, else the hardware count.
inline unsigned thread_budget() {
  if (const char* env = std::getenv("STRETCHNAS_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Runs independent checks on up to `threads` workers; results keep the
/// order of `checks`. An exception inside a check fails that check.
inline std::vector<CheckResult> run_checks(const std::vector<Check>& checks, unsigned threads) {
  std::vector<CheckResult> results(checks.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < checks.size(); k = next++) {
      const auto t0 = std::chrono::steady_clock::now();
      try {
        results[k] = checks[k]();
      } catch (const std::exception& e) {
        results[k] = {"check " + std::to_string(k), false, std::string("exception: ") + e.what(), 0};
      }
      results[k].seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
  };
  const unsigned n = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(checks.size())));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return results;
}

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream out;
  out.precision(3);
  out << v;
  return out.str();
}

inline std::vector<double> softmax_of(std::span<const Real> v) {
  const double top = *std::max_element(v.begin(), v.end());
  std::vector<double> p;
  double total = 0;
  for (Real x : v) total += p.emplace_back(std::exp(static_cast<double>(x) - top));
  for (auto& x : p) x /= total;
  return p;
}

inline void fill_normal(TopologyVariables& beta, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> dist(0.0, scale);
  for (auto t : beta.tensors())
    for (auto& v : t.mutable_data()) v = static_cast<Real>(dist(rng));
}

}  // namespace detail

/// s(i, j) summed member by member over the enumerated space, with the same
/// scale constants as the merged form.
inline double enumerated_factor(const TopologyVariables& beta, const Edge& e) {
  const int n = beta.n_nodes();
  switch (beta.mode()) {
    case TopologyMode::InputPair: {
      const auto p = detail::softmax_of(beta.node(e.to).data());
      const auto pairs = topology::enumerate_input_pairs(e.to, n);
      double s = 0;
      for (std::size_t k = 0; k < pairs.size(); ++k)
        if (pairs[k].first == e.from || pairs[k].second == e.from) s += p[k];
      return s;
    }
    case TopologyMode::OutputPair: {
      const int posterior = n - e.from;
      if (posterior == 1) return 1.0;
      const auto p = detail::softmax_of(beta.node(e.from).data());
      const auto pairs = topology::enumerate_output_pairs(e.from, n);
      double s = 0;
      for (std::size_t k = 0; k < pairs.size(); ++k)
        if (pairs[k].first == e.to || pairs[k].second == e.to) s += p[k];
      return s * topology::output_pair_scale(posterior);
    }
    case TopologyMode::Arbitrary: {
      const auto p = detail::softmax_of(beta.node(e.from).data());
      const auto codes = topology::enumerate_codes(e.from, n);
      double s = 0;
      for (std::size_t k = 0; k < codes.size(); ++k)
        if (codes[k].connects(e.from, e.to)) s += p[k];
      return s * topology::arbitrary_scale(n - e.from);
    }
  }
  return 0;
}

/// Unmerged cell forward: every space member mixes its own edges weighted by
/// its probability, and the member contributions are summed.
inline Tensor pairwise_cell_forward(const search_space::SearchCell& cell, const Tensor& s0, const Tensor& s1,
                                    const search_space::OperationVariables& alpha, const TopologyVariables& beta) {
  ad::NoGradScope no_grad;
  const int n = beta.n_nodes();
  auto [x1, x2] = cell.preprocess(s0, s1);
  std::vector<Tensor> states{x1, x2};
  auto mixed = [&](int i, int j) {
    return search_space::mixed_op_forward(states[static_cast<std::size_t>(i - 1)], alpha.edge({i, j}), cell.ops({i, j}));
  };
  for (int j = kInputNodes + 1; j <= n; ++j) {
    std::vector<Tensor> terms;
    if (beta.mode() == TopologyMode::InputPair) {
      const auto p = detail::softmax_of(beta.node(j).data());
      const auto pairs = topology::enumerate_input_pairs(j, n);
      for (std::size_t k = 0; k < pairs.size(); ++k) {
        terms.push_back(ad::scale(mixed(pairs[k].first, j), static_cast<Real>(p[k])));
        terms.push_back(ad::scale(mixed(pairs[k].second, j), static_cast<Real>(p[k])));
      }
    } else {
      for (int i = 1; i < j; ++i) {
        const int posterior = n - i;
        if (beta.mode() == TopologyMode::OutputPair && posterior == 1) {
          terms.push_back(mixed(i, j));
          continue;
        }
        const auto p = detail::softmax_of(beta.node(i).data());
        const Tensor y = mixed(i, j);
        if (beta.mode() == TopologyMode::OutputPair) {
          const auto pairs = topology::enumerate_output_pairs(i, n);
          for (std::size_t k = 0; k < pairs.size(); ++k)
            if (pairs[k].first == j || pairs[k].second == j)
              terms.push_back(ad::scale(y, static_cast<Real>(p[k] * topology::output_pair_scale(posterior))));
        } else {
          const auto codes = topology::enumerate_codes(i, n);
          for (std::size_t k = 0; k < codes.size(); ++k)
            if (codes[k].connects(i, j))
              terms.push_back(ad::scale(y, static_cast<Real>(p[k] * topology::arbitrary_scale(posterior))));
        }
      }
    }
    states.push_back(ad::add_all(terms));
  }
  return ad::concat_channels({states.begin() + kInputNodes, states.end()});
}

// Per-node argmax codes as peaked scores: +margin on the chosen code over
// uniform noise in [-1, 1].
inline TopologyVariables beta_from_codes(int n, const std::vector<std::size_t>& codes, std::mt19937_64* noise,
                                         double margin = 10) {
  TopologyVariables beta(TopologyMode::Arbitrary, n);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int k = 1; k <= n; ++k) {
    auto v = beta.node(k).mutable_data();
    if (noise)
      for (auto& x : v) x = static_cast<Real>(u(*noise));
    v[codes.at(static_cast<std::size_t>(k - 1))] = static_cast<Real>(margin);
  }
  return beta;
}

inline derivation::DerivedArchitecture decoded_cell(const TopologyVariables& beta) {
  const auto d = derivation::decode_topology(beta);
  derivation::DerivedArchitecture a{beta.n_nodes(), {}, d.removed, derivation::CellKind::Normal, {}};
  for (const auto& e : d.edges) a.edges.push_back({e, search_space::OperationKind::Identity});
  return a;
}

/// Random per-node codes (index into enumerate_codes) whose decode is valid,
/// or, with `starve`, has exactly one kept node stripped of every input.
inline std::vector<std::size_t> constructed_codes(int n, std::mt19937_64& rng, bool starve) {
  std::vector<std::size_t> codes(static_cast<std::size_t>(n), 0);
  auto bit = [&](int j) { return std::size_t{1} << (n - j); };  // bit of target j in any code
  for (int i = 1; i < n; ++i) codes[static_cast<std::size_t>(i - 1)] = rng() % (std::size_t{1} << (n - i));
  auto kept = [&](int k) { return k <= kInputNodes || k == n || codes[static_cast<std::size_t>(k - 1)] != 0; };
  for (int j = kInputNodes + 1; j <= n; ++j) {
    if (!kept(j)) continue;
    bool fed = false;
    for (int i = 1; i < j; ++i) fed = fed || (kept(i) && (codes[static_cast<std::size_t>(i - 1)] & bit(j)));
    if (fed) continue;
    std::vector<int> sources;
    for (int i = 1; i < j; ++i)
      if (kept(i)) sources.push_back(i);
    const int i = sources[rng() % sources.size()];
    codes[static_cast<std::size_t>(i - 1)] |= bit(j);
  }
  if (starve) {
    std::vector<int> targets;
    for (int j = kInputNodes + 1; j <= n; ++j)
      if (kept(j)) targets.push_back(j);
    const int j = targets[rng() % targets.size()];
    for (int i = 1; i < j; ++i) codes[static_cast<std::size_t>(i - 1)] &= ~bit(j);
  }
  return codes;
}

inline std::vector<Check> spaces_checks() {
  std::vector<Check> checks;
  for (int n = 4; n <= 9; ++n) {
    checks.push_back([n] {
      std::size_t mismatches = 0, nodes = 0;
      for (int k = 1; k <= n; ++k, ++nodes) {
        const auto in = topology::enumerate_input_pairs(k, n).size();
        const auto out = topology::enumerate_output_pairs(k, n).size();
        const auto codes = topology::enumerate_codes(k, n).size();
        if (in != topology::binomial(k - 1, 2) || out != topology::binomial(n - k, 2) ||
            codes != (std::size_t{1} << (n - k)))
          ++mismatches;
      }
      return CheckResult{"space sizes N=" + std::to_string(n), mismatches == 0,
                         std::to_string(nodes) + " nodes, " + std::to_string(mismatches) + " mismatches"};
    });
  }
  return checks;
}

inline std::vector<Check> oracle_checks() {
  std::vector<Check> checks;
  for (auto mode : {TopologyMode::InputPair, TopologyMode::OutputPair, TopologyMode::Arbitrary}) {
    for (int n = 4; n <= 6; ++n) {
      checks.push_back([mode, n] {
        std::mt19937_64 rng(1000 + 10 * static_cast<std::uint64_t>(mode) + static_cast<std::uint64_t>(n));
        double worst_factor = 0;
        for (int trial = 0; trial < 100; ++trial) {
          TopologyVariables beta(mode, n);
          detail::fill_normal(beta, rng, 1.5);
          ad::NoGradScope no_grad;
          const auto merged = topology::merge(beta);
          for (const auto& e : cell_edges(n))
            worst_factor = std::max(worst_factor, std::abs(merged.at(e).item() - enumerated_factor(beta, e)));
        }
        search_space::Rng wrng(2000 + static_cast<std::uint64_t>(n));
        const search_space::CellSpec spec{n, search_space::default_op_set(), false};
        search_space::SearchCell cell(spec, 3, 3, 3, false, wrng);
        search_space::OperationVariables alpha(n, spec.ops.size());
        std::normal_distribution<double> g(0, 1);
        for (auto t : alpha.tensors())
          for (auto& v : t.mutable_data()) v = static_cast<Real>(g(rng));
        auto input = [&] {
          std::vector<Real> v(2 * 3 * 4 * 4);
          for (auto& x : v) x = static_cast<Real>(g(rng));
          return Tensor({2, 3, 4, 4}, v);
        };
        const Tensor s0 = input(), s1 = input();
        double worst_forward = 0;
        for (int trial = 0; trial < 3; ++trial) {
          TopologyVariables beta(mode, n);
          detail::fill_normal(beta, rng, 1.5);
          ad::NoGradScope no_grad;
          const Tensor a = cell.forward(s0, s1, alpha, topology::merge(beta));
          const Tensor b = pairwise_cell_forward(cell, s0, s1, alpha, beta);
          for (std::size_t k = 0; k < a.numel(); ++k)
            worst_forward = std::max(worst_forward, std::abs(double(a[k]) - b[k]));
        }
        const double factor_tol = sizeof(Real) == 8 ? 1e-12 : 1e-5;
        const double forward_tol = sizeof(Real) == 8 ? 1e-9 : 1e-4;
        return CheckResult{"merged vs enumerated " + std::string(topology::to_string(mode)) + " N=" + std::to_string(n),
                           worst_factor <= factor_tol && worst_forward <= forward_tol,
                           "factor err " + detail::fmt(worst_factor) + ", forward err " + detail::fmt(worst_forward)};
      });
    }
  }
  return checks;
}

inline std::vector<Check> regularizer_checks() {
  std::vector<Check> checks;
  for (bool starve : {false, true}) {
    checks.push_back([starve] {
      std::mt19937_64 rng(starve ? 77 : 76);
      std::size_t wrong = 0;
      for (int k = 0; k < 50; ++k) {
        const int n = 4 + k % 4;
        const auto beta = beta_from_codes(n, constructed_codes(n, rng, starve), &rng);
        ad::NoGradScope no_grad;
        const double r = topology::regularizer(beta).item();
        const bool valid = derivation::validate(decoded_cell(beta)).valid;
        if (starve ? !(r > 0 && !valid) : !(r == 0 && valid)) ++wrong;
      }
      return CheckResult{starve ? "50 starved topologies give r > 0" : "50 valid topologies give r = 0", wrong == 0,
                         std::to_string(wrong) + " disagreements"};
    });
  }
  for (int n = 4; n <= 6; ++n) {
    checks.push_back([n] {
      std::vector<std::size_t> codes(static_cast<std::size_t>(n), 0);
      std::size_t combos = 0, wrong = 0;
      while (true) {
        const auto beta = beta_from_codes(n, codes, nullptr);
        ad::NoGradScope no_grad;
        const bool zero = topology::regularizer(beta).item() == 0;
        if (zero != derivation::validate(decoded_cell(beta)).valid) ++wrong;
        ++combos;
        int k = 0;
        while (k < n && ++codes[static_cast<std::size_t>(k)] == (std::size_t{1} << (n - k - 1))) codes[static_cast<std::size_t>(k++)] = 0;
        if (k == n) break;
      }
      return CheckResult{"exhaustive zero-set agreement N=" + std::to_string(n), wrong == 0,
                         std::to_string(combos) + " code combinations, " + std::to_string(wrong) + " disagreements"};
    });
  }
  return checks;
}

// d(L_task + 10 r) on an N=5, L=1 supernet against central differences.
inline std::vector<Check> gradcheck_checks() {
  return {[] {
    search_space::SupernetConfig config;
    config.layers = 1;
    config.n_nodes = 5;
    config.init_channels = 3;
    config.input_shape = {2, 3, 3};
    config.reduction_positions = {};
    search_space::Rng rng(31);
    search_space::Supernet net(config, rng);
    auto arch = search_space::ArchitectureVariables::zeros(config);
    std::normal_distribution<double> g(0, 1);
    for (auto t : arch.alpha_tensors())
      for (auto& v : t.mutable_data()) v = static_cast<Real>(0.5 * g(rng));
    for (auto t : arch.beta_tensors())
      for (auto& v : t.mutable_data()) v = static_cast<Real>(g(rng));
    std::vector<Real> xs(6 * 2 * 3 * 3);
    for (auto& v : xs) v = static_cast<Real>(g(rng));
    const Tensor x({6, 2, 3, 3}, xs);
    const std::vector<int> y{0, 1, 0, 1, 0, 1};
    auto loss = [&] {
      return topology::loss_with_regularizer(ad::cross_entropy(net.forward(x, arch), y), arch.regularizer(), 10);
    };
    const auto a = ad::gradcheck_tensors(loss, arch.named(), 1e-5, 1e-4);
    const auto w = ad::gradcheck_tensors(loss, net.named_parameters(), 1e-5, 1e-4);
    return CheckResult{"gradcheck N=5 L=1 (w, alpha, beta)", a.passed && w.passed,
                       "alpha/beta max rel err " + detail::fmt(a.max_rel_error) + " over " +
                           std::to_string(a.coordinates) + " coords; w max rel err " + detail::fmt(w.max_rel_error) +
                           " over " + std::to_string(w.coordinates) + " coords"};
  }};
}

inline SuiteReport run_suite(Suite suite, unsigned threads = thread_budget()) {
  std::vector<Check> checks;
  switch (suite) {
    case Suite::Spaces: checks = spaces_checks(); break;
    case Suite::Oracle: checks = oracle_checks(); break;
    case Suite::Regularizer: checks = regularizer_checks(); break;
    case Suite::Gradcheck: checks = gradcheck_checks(); break;
  }
  return {suite, run_checks(checks, threads)};
}

}  // namespace stretchnas::verify
