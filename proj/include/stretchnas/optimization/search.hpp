#pragma once

#include <algorithm>
#include <cstdio>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include "stretchnas/derivation/decode.hpp"
#include "stretchnas/optimization/dataset.hpp"
#include "stretchnas/optimization/optimizers.hpp"
#include "stretchnas/search_space/supernet.hpp"

namespace stretchnas::optimization {

using search_space::ArchitectureVariables;
using search_space::Rng;
using search_space::Supernet;
using search_space::SupernetConfig;

enum class OptimizerMode { Darts, Milenas };

inline std::string_view to_string(OptimizerMode mode) { return mode == OptimizerMode::Darts ? "darts" : "milenas"; }

inline OptimizerMode parse_optimizer_mode(std::string_view text) {
  if (text == "darts") return OptimizerMode::Darts;
  if (text == "milenas") return OptimizerMode::Milenas;
  throw ConfigError("unknown optimizer '" + std::string(text) + "' (expected darts or milenas)");
}

struct SearchHyperparams {
  double lr_w = 0.025;
  double lr_w_min = 0.001;
  double momentum_w = 0.9;
  double weight_decay_w = 3e-4;
  double grad_clip = 5.0;
  double lr_arch = 3e-4;
  double arch_beta1 = 0.5;
  double arch_beta2 = 0.999;
  double weight_decay_arch = 1e-3;
  double lambda = 10.0;
  double lambda_prime = 1.0;
  std::size_t batch_size = 64;
  int epochs = 50;

  void validate() const {
    if (!(lr_w > 0) || !(lr_arch >= 0) || lr_w_min < 0) throw ConfigError("learning rates must be positive");
    if (!(lambda >= 0)) throw ConfigError("lambda must be non-negative");
    if (!(lambda_prime >= 0)) throw ConfigError("lambda_prime must be non-negative");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (epochs < 0) throw ConfigError("epochs must be non-negative");
  }
};

/// Everything a search run mutates: weights, architecture variables,
/// optimizer moments, epoch counter and the data-order generator.
struct SearchState {
  Supernet net;
  ArchitectureVariables arch;
  Sgd w_opt;
  Adam arch_opt;
  int epoch = 0;
  Rng rng;

  static SearchState create(const SupernetConfig& config, const SearchHyperparams& hyper, std::uint64_t seed) {
    SearchState state;
    state.rng.seed(seed);
    state.net = Supernet(config, state.rng);
    state.arch = ArchitectureVariables::zeros(config);
    state.w_opt = Sgd(state.net.parameters(), hyper.momentum_w, hyper.weight_decay_w);
    state.arch_opt = Adam(state.arch_tensors(), hyper.arch_beta1, hyper.arch_beta2, hyper.weight_decay_arch);
    return state;
  }

  std::vector<Tensor> weights() const { return net.parameters(); }

  // Alpha tensors followed by beta tensors.
  std::vector<Tensor> arch_tensors() const {
    auto out = arch.alpha_tensors();
    for (const auto& t : arch.beta_tensors()) out.push_back(t);
    return out;
  }
  std::size_t alpha_count() const { return arch.alpha_tensors().size(); }
};

inline Tensor task_loss(const SearchState& state, const Batch& batch) {
  return ad::cross_entropy(state.net.forward(batch.x, state.arch), batch.y);
}

namespace detail {

inline GradList collect(const ad::Gradients& grads, const std::vector<Tensor>& tensors) {
  GradList out;
  for (const auto& t : tensors) {
    auto g = grads.raw(t);
    out.emplace_back(g.begin(), g.end());
    if (g.empty()) out.back().assign(t.numel(), Real{0});
  }
  return out;
}

inline void axpy(GradList& y, double a, const GradList& x) {
  for (std::size_t k = 0; k < y.size(); ++k)
    for (std::size_t i = 0; i < y[k].size(); ++i) y[k][i] = static_cast<Real>(y[k][i] + a * x[k][i]);
}

}  // namespace detail

struct LossGradients {
  double loss = 0;
  GradList grads;
};

// Gradient of `loss_fn()` with respect to `wrt`.
inline LossGradients gradients_of(const std::function<Tensor()>& loss_fn, const std::vector<Tensor>& wrt) {
  ad::Tape tape;
  ad::TapeScope scope(tape);
  Tensor loss = loss_fn();
  auto grads = ad::backward(tape, loss);
  return {static_cast<double>(loss.item()), detail::collect(grads, wrt)};
}

/// Architecture gradient and the losses it was computed from.
struct ArchGradient {
  double train_loss = 0;  // mixed-level only
  double val_loss = 0;
  GradList arch;           // alpha tensors then beta tensors
  GradList weights;        // mixed-level only: d L_tr / d w at the same point
};

/// First-order bi-level gradient: d/d(alpha, beta) of L_val, plus
/// lambda d r / d beta on the beta part.
inline ArchGradient darts_arch_gradient(const SearchState& state, const Batch& val, const SearchHyperparams& hyper) {
  const auto wrt = state.arch_tensors();
  auto result = gradients_of(
      [&] {
        Tensor l = task_loss(state, val);
        return state.arch.beta_normal ? topology::loss_with_regularizer(l, state.arch.regularizer(), hyper.lambda)
                                      : l;
      },
      wrt);
  ArchGradient out;
  out.arch = std::move(result.grads);
  {
    ad::NoGradScope no_grad;
    out.val_loss = result.loss - hyper.lambda * state.arch.regularizer().item();
  }
  return out;
}

/// Mixed-level gradient: alpha follows L_tr + lambda' L_val(val_alpha); beta
/// follows L_tr + lambda' L_val(val_beta) + lambda r.
inline ArchGradient milenas_arch_gradient(const SearchState& state, const Batch& train, const Batch& val_alpha,
                                          const Batch& val_beta, const SearchHyperparams& hyper) {
  const auto arch = state.arch_tensors();
  const std::size_t n_alpha = state.alpha_count();
  std::vector<Tensor> tr_wrt = state.weights();
  tr_wrt.insert(tr_wrt.end(), arch.begin(), arch.end());
  auto tr = gradients_of([&] { return task_loss(state, train); }, tr_wrt);

  ArchGradient out;
  out.train_loss = tr.loss;
  out.weights.assign(tr.grads.begin(), tr.grads.end() - static_cast<std::ptrdiff_t>(arch.size()));
  out.arch.assign(tr.grads.end() - static_cast<std::ptrdiff_t>(arch.size()), tr.grads.end());

  const std::vector<Tensor> alpha(arch.begin(), arch.begin() + static_cast<std::ptrdiff_t>(n_alpha));
  const std::vector<Tensor> beta(arch.begin() + static_cast<std::ptrdiff_t>(n_alpha), arch.end());

  auto va = gradients_of([&] { return task_loss(state, val_alpha); }, alpha);
  out.val_loss = va.loss;
  GradList alpha_part(out.arch.begin(), out.arch.begin() + static_cast<std::ptrdiff_t>(n_alpha));
  detail::axpy(alpha_part, hyper.lambda_prime, va.grads);

  GradList beta_part(out.arch.begin() + static_cast<std::ptrdiff_t>(n_alpha), out.arch.end());
  if (!beta.empty()) {
    auto vb = gradients_of(
        [&] {
          Tensor l = ad::scale(task_loss(state, val_beta), static_cast<Real>(hyper.lambda_prime));
          return topology::loss_with_regularizer(l, state.arch.regularizer(), hyper.lambda);
        },
        beta);
    detail::axpy(beta_part, 1.0, vb.grads);
  }
  out.arch = std::move(alpha_part);
  out.arch.insert(out.arch.end(), beta_part.begin(), beta_part.end());
  return out;
}

struct StepStats {
  double train_loss = 0;
  double val_loss = 0;
};

inline void weight_step(SearchState& state, GradList grads, const SearchHyperparams& hyper) {
  clip_grad_norm(grads, hyper.grad_clip);
  auto w = state.weights();
  state.w_opt.step(w, grads, hyper.lr_w);
}

inline void arch_step(SearchState& state, const GradList& grads, const SearchHyperparams& hyper) {
  auto a = state.arch_tensors();
  state.arch_opt.step(a, grads, hyper.lr_arch);
}

/// Architecture step on the validation batch at the current weights, then a
/// weight step on the training batch.
inline StepStats darts_first_order_step(SearchState& state, const Batch& train, const Batch& val,
                                        const SearchHyperparams& hyper) {
  StepStats stats;
  const auto g = darts_arch_gradient(state, val, hyper);
  stats.val_loss = g.val_loss;
  arch_step(state, g.arch, hyper);
  auto w = gradients_of([&] { return task_loss(state, train); }, state.weights());
  stats.train_loss = w.loss;
  weight_step(state, std::move(w.grads), hyper);
  return stats;
}

/// Mixed-level step: all gradients at the current point, then both updates.
inline StepStats milenas_step(SearchState& state, const Batch& train, const Batch& val_alpha, const Batch& val_beta,
                              const SearchHyperparams& hyper) {
  auto g = milenas_arch_gradient(state, train, val_alpha, val_beta, hyper);
  arch_step(state, g.arch, hyper);
  weight_step(state, std::move(g.weights), hyper);
  return {g.train_loss, g.val_loss};
}

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0;
  double val_loss = 0;
  double r_beta = 0;
  double beta_entropy_mean = 0;
  std::size_t decoded_edge_count = 0;
};

inline std::string metrics_csv(const std::vector<EpochMetrics>& metrics) {
  std::string out = "epoch,L_tr,L_val,r_beta,beta_entropy_mean,decoded_edge_count\n";
  char line[256];
  for (const auto& m : metrics) {
    std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.17g,%.17g,%zu\n", m.epoch, m.train_loss, m.val_loss, m.r_beta,
                  m.beta_entropy_mean, m.decoded_edge_count);
    out += line;
  }
  return out;
}

/// Current decode of both cells: the topology decode when topology variables
/// exist, the top-2 rule otherwise.
inline derivation::Genotype current_genotype(const SearchState& state, const derivation::Provenance& provenance = {}) {
  const auto& ops = state.net.config().ops;
  if (state.arch.beta_normal) return derivation::derive_genotype(state.arch, ops, provenance);
  return {derivation::hand_crafted_top2_decode(state.arch.alpha_normal, ops, derivation::CellKind::Normal, provenance),
          derivation::hand_crafted_top2_decode(state.arch.alpha_reduce, ops, derivation::CellKind::Reduction,
                                               provenance)};
}

inline std::size_t kept_edge_count(const derivation::DerivedArchitecture& arch) {
  return static_cast<std::size_t>(std::count_if(arch.edges.begin(), arch.edges.end(),
                                                [&](const auto& e) { return derivation::feeds_kept(arch, e); }));
}

inline double mean_beta_entropy(const ArchitectureVariables& arch) {
  if (!arch.beta_normal) return 0.0;
  return 0.5 * (topology::mean_entropy(*arch.beta_normal) + topology::mean_entropy(*arch.beta_reduce));
}

struct SearchCallbacks {
  std::function<void(const EpochMetrics&, const SearchState&)> on_epoch;
  // Called with the state as it was when a numeric failure aborted the run.
  std::function<void(const SearchState&)> on_abort;
};

/// Runs epochs state.epoch .. hyper.epochs - 1. Each epoch reshuffles the
/// training split and the validation stream(s) from state.rng; the weight
/// learning rate follows a cosine schedule over hyper.epochs.
inline std::vector<EpochMetrics> search_loop(SearchState& state, const SplitDatasets& splits,
                                             const SearchHyperparams& hyper, OptimizerMode mode,
                                             const SearchCallbacks& callbacks = {}) {
  hyper.validate();
  std::vector<EpochMetrics> metrics;
  const Dataset merged_val = mode == OptimizerMode::Darts ? concat(splits.val_alpha, splits.val_beta) : Dataset{};
  const Dataset& val_a = mode == OptimizerMode::Darts ? merged_val : splits.val_alpha;
  const Dataset& val_b = mode == OptimizerMode::Darts ? merged_val : splits.val_beta;
  if (splits.train.size() == 0 || val_a.size() == 0 || val_b.size() == 0)
    throw ContractError("search_loop: empty data split");

  for (int epoch = state.epoch; epoch < hyper.epochs; ++epoch) {
    SearchHyperparams epoch_hyper = hyper;
    epoch_hyper.lr_w = cosine_lr(hyper.lr_w, hyper.lr_w_min, epoch, hyper.epochs);

    auto tr_idx = iota_indices(splits.train.size());
    auto va_idx = iota_indices(val_a.size());
    auto vb_idx = iota_indices(val_b.size());
    std::shuffle(tr_idx.begin(), tr_idx.end(), state.rng);
    std::shuffle(va_idx.begin(), va_idx.end(), state.rng);
    if (mode == OptimizerMode::Milenas) std::shuffle(vb_idx.begin(), vb_idx.end(), state.rng);

    const std::size_t bs = std::min(hyper.batch_size, splits.train.size());
    const std::size_t steps = std::max<std::size_t>(1, splits.train.size() / bs);
    auto cyclic = [](const std::vector<std::size_t>& idx, std::size_t step, std::size_t size) {
      const std::size_t b = std::min(size, idx.size());
      std::vector<std::size_t> out(b);
      for (std::size_t k = 0; k < b; ++k) out[k] = idx[(step * b + k) % idx.size()];
      return out;
    };

    double tr_sum = 0, val_sum = 0;
    try {
      for (std::size_t s = 0; s < steps; ++s) {
        const std::vector<std::size_t> tr(tr_idx.begin() + static_cast<std::ptrdiff_t>(s * bs),
                                          tr_idx.begin() + static_cast<std::ptrdiff_t>((s + 1) * bs));
        const Batch train = make_batch(splits.train, tr);
        StepStats stats;
        if (mode == OptimizerMode::Darts) {
          stats = darts_first_order_step(state, train, make_batch(val_a, cyclic(va_idx, s, hyper.batch_size)),
                                         epoch_hyper);
        } else {
          stats = milenas_step(state, train, make_batch(val_a, cyclic(va_idx, s, hyper.batch_size)),
                               make_batch(val_b, cyclic(vb_idx, s, hyper.batch_size)), epoch_hyper);
        }
        tr_sum += stats.train_loss;
        val_sum += stats.val_loss;
      }
    } catch (const NumericError&) {
      if (callbacks.on_abort) callbacks.on_abort(state);
      throw;
    }

    state.epoch = epoch + 1;
    EpochMetrics m;
    m.epoch = epoch + 1;
    m.train_loss = tr_sum / static_cast<double>(steps);
    m.val_loss = val_sum / static_cast<double>(steps);
    {
      ad::NoGradScope no_grad;
      m.r_beta = state.arch.regularizer().item();
    }
    m.beta_entropy_mean = mean_beta_entropy(state.arch);
    const auto genotype = current_genotype(state);
    m.decoded_edge_count = kept_edge_count(genotype.normal) + kept_edge_count(genotype.reduce);
    metrics.push_back(m);
    if (callbacks.on_epoch) callbacks.on_epoch(m, state);
  }
  return metrics;
}

}  // namespace stretchnas::optimization
