#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "stretchnas/derivation/cost.hpp"
#include "stretchnas/derivation/network.hpp"
#include "stretchnas/optimization/dataset.hpp"
#include "stretchnas/optimization/optimizers.hpp"

namespace stretchnas::derivation {

struct RetrainOptions {
  int epochs = 20;
  std::size_t batch_size = 64;
  double lr = 0.025;
  double lr_min = 0.001;
  double momentum = 0.9;
  double weight_decay = 3e-4;
  double grad_clip = 5.0;
  std::size_t eval_chunk = 250;
  std::uint64_t seed = 0;
  bool force = false;  // accept a layer count different from the search
};

struct RetrainResult {
  double train_accuracy = 0;
  double test_accuracy = 0;
  std::vector<double> epoch_losses;
  Cost cost;
  int depth_normal = 0;
  int depth_reduce = 0;
};

/// Fraction of correctly classified samples. Batch norm uses the statistics
/// of each evaluation chunk, so results depend on the chunk size.
inline double accuracy(const EvalNetwork& net, const optimization::Dataset& data, std::size_t chunk) {
  if (data.size() == 0) return 0.0;
  ad::NoGradScope no_grad;
  std::size_t correct = 0;
  const auto idx = optimization::iota_indices(data.size());
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    const std::size_t end = std::min(data.size(), start + chunk);
    std::span<const std::size_t> part(idx.data() + start, end - start);
    const Tensor logits = net.forward(data.batch(part));
    const std::size_t k = logits.size(1);
    for (std::size_t r = 0; r < part.size(); ++r) {
      auto row = logits.data().subspan(r * k, k);
      const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      if (best == data.labels[part[r]]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

inline void require_consistent_layers(const Genotype& genotype, const SupernetConfig& config, bool force) {
  if (force) return;
  for (const auto* cell : {&genotype.normal, &genotype.reduce}) {
    if (cell->provenance.layers != config.layers) {
      throw ConsistencyError("inconsistent layers: architecture searched with " +
                             std::to_string(cell->provenance.layers) + " layers, evaluation config has " +
                             std::to_string(config.layers));
    }
  }
}

/// Fresh weights, momentum SGD with a cosine schedule on cross-entropy.
inline RetrainResult retrain_from_scratch(const Genotype& genotype, const SupernetConfig& config,
                                          const optimization::Dataset& train, const optimization::Dataset& test,
                                          const RetrainOptions& options) {
  require_consistent_layers(genotype, config, options.force);
  if (train.size() == 0) throw ContractError("retrain: empty training set");
  search_space::Rng rng(options.seed);
  EvalNetwork net(genotype, config, rng);
  auto params = net.parameters();
  optimization::Sgd sgd(params, options.momentum, options.weight_decay);

  RetrainResult result;
  const std::size_t bs = std::min(options.batch_size, train.size());
  const std::size_t steps = std::max<std::size_t>(1, train.size() / bs);
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    const double lr = optimization::cosine_lr(options.lr, options.lr_min, epoch, options.epochs);
    auto idx = optimization::iota_indices(train.size());
    std::shuffle(idx.begin(), idx.end(), rng);
    double loss_sum = 0;
    for (std::size_t s = 0; s < steps; ++s) {
      std::span<const std::size_t> part(idx.data() + s * bs, bs);
      const auto batch = optimization::make_batch(train, part);
      ad::Tape tape;
      ad::TapeScope scope(tape);
      const Tensor loss = ad::cross_entropy(net.forward(batch.x), batch.y);
      const auto grads = ad::backward(tape, loss);
      optimization::GradList g;
      for (const auto& p : params) {
        auto raw = grads.raw(p);
        g.emplace_back(raw.begin(), raw.end());
        if (raw.empty()) g.back().assign(p.numel(), ad::Real{0});
      }
      optimization::clip_grad_norm(g, options.grad_clip);
      sgd.step(params, g, lr);
      loss_sum += loss.item();
    }
    result.epoch_losses.push_back(loss_sum / static_cast<double>(steps));
  }
  result.train_accuracy = accuracy(net, train, options.eval_chunk);
  result.test_accuracy = accuracy(net, test, options.eval_chunk);
  result.cost = count_params_flops(genotype, config);
  result.depth_normal = cell_depth(genotype.normal);
  result.depth_reduce = cell_depth(genotype.reduce);
  return result;
}

}  // namespace stretchnas::derivation
