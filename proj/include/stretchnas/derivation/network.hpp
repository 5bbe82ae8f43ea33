#pragma once

#include <set>
#include <string>
#include <vector>

#include "stretchnas/derivation/architecture.hpp"
#include "stretchnas/search_space/supernet.hpp"

namespace stretchnas::derivation {

using search_space::NamedParams;
using search_space::Operation;
using search_space::ReluConvBn;
using search_space::Rng;
using search_space::SupernetConfig;
using ad::Tensor;

/// Discrete cell: one operation per kept edge, removed nodes pruned.
class EvalCell {
 public:
  EvalCell(const DerivedArchitecture& arch, std::size_t c_prev_prev, std::size_t c_prev, std::size_t c,
           bool reduction_prev, bool reduction, Rng& rng)
      : arch_(arch), channels_(c) {
    const auto report = validate(arch);
    if (!report.valid) throw ContractError("cannot build a network from an invalid cell: " + report.summary());
    pre0_ = ReluConvBn(c_prev_prev, c, 1, reduction_prev ? 2 : 1, 0, rng);
    pre1_ = ReluConvBn(c_prev, c, 1, 1, 0, rng);
    for (const auto& e : arch_.edges) {
      if (!feeds_kept(arch_, e)) continue;
      const std::size_t stride = reduction && !is_intermediate(e.edge.from) ? 2 : 1;
      edges_.push_back(e);
      ops_.emplace_back(e.op, c, stride, rng);
    }
    kept_ = arch_.kept_intermediate_nodes();
  }

  std::size_t output_channels() const { return channels_ * kept_.size(); }
  const std::vector<Operation>& ops() const { return ops_; }

  Tensor forward(const Tensor& s0, const Tensor& s1) const {
    std::vector<Tensor> states(static_cast<std::size_t>(arch_.n_nodes));
    states[0] = pre0_.forward(s0);
    states[1] = pre1_.forward(s1);
    for (int j : kept_) {
      std::vector<Tensor> terms;
      for (std::size_t k = 0; k < edges_.size(); ++k)
        if (edges_[k].edge.to == j) terms.push_back(ops_[k].forward(states[static_cast<std::size_t>(edges_[k].edge.from - 1)]));
      states[static_cast<std::size_t>(j - 1)] = ad::add_all(terms);
    }
    std::vector<Tensor> outputs;
    for (int j : kept_) outputs.push_back(states[static_cast<std::size_t>(j - 1)]);
    return ad::concat_channels(outputs);
  }

  void collect(const std::string& prefix, NamedParams& out) const {
    pre0_.collect(prefix + ".pre0", out);
    pre1_.collect(prefix + ".pre1", out);
    for (std::size_t k = 0; k < edges_.size(); ++k)
      ops_[k].collect(prefix + ".e" + std::to_string(edges_[k].edge.from) + "_" + std::to_string(edges_[k].edge.to) +
                          "." + std::string(search_space::op_name(edges_[k].op)),
                      out);
  }

 private:
  DerivedArchitecture arch_;
  std::size_t channels_;
  ReluConvBn pre0_;
  ReluConvBn pre1_;
  std::vector<ArchEdge> edges_;
  std::vector<Operation> ops_;
  std::vector<int> kept_;
};

/// Network stacked from a derived genotype with the search-time layout.
class EvalNetwork {
 public:
  EvalNetwork(const Genotype& genotype, const SupernetConfig& config, Rng& rng) : config_(config) {
    if (config.input_shape.size() != 3) throw ShapeError("input shape must be (C, H, W)");
    const std::size_t c = config.init_channels;
    stem_ = search_space::init_weight({c, config.input_shape[0], 3, 3}, config.input_shape[0] * 9, rng);
    stem_bn_ = search_space::BatchNorm(c);
    std::size_t c_pp = c, c_p = c, c_cur = c;
    bool reduction_prev = false;
    for (int layer = 0; layer < config.layers; ++layer) {
      const bool reduction = config.is_reduction(layer);
      if (reduction) c_cur *= 2;
      cells_.emplace_back(reduction ? genotype.reduce : genotype.normal, c_pp, c_p, c_cur, reduction_prev, reduction,
                          rng);
      reduction_prev = reduction;
      c_pp = c_p;
      c_p = cells_.back().output_channels();
    }
    classifier_w_ = search_space::init_weight({c_p, config.n_classes}, c_p, rng);
    classifier_b_ = Tensor::zeros({config.n_classes}, true);
  }

  const SupernetConfig& config() const { return config_; }

  Tensor forward(const Tensor& batch) const {
    if (batch.dim() != 4 || batch.size(1) != config_.input_shape[0] || batch.size(2) != config_.input_shape[1] ||
        batch.size(3) != config_.input_shape[2]) {
      throw ShapeError("network input " + ad::shape_str(batch.shape()) + " does not match configured sample shape " +
                       ad::shape_str(config_.input_shape));
    }
    Tensor s0 = stem_bn_.forward(ad::conv2d(batch, stem_, {1, 1, 1, 1}));
    Tensor s1 = s0;
    for (const auto& cell : cells_) {
      Tensor out = cell.forward(s0, s1);
      s0 = s1;
      s1 = out;
    }
    return ad::add_rowwise(ad::matmul(ad::global_avg_pool(s1), classifier_w_), classifier_b_);
  }

  NamedParams named_parameters() const {
    NamedParams out;
    out.emplace_back("stem.w", stem_);
    stem_bn_.collect("stem.bn", out);
    for (std::size_t k = 0; k < cells_.size(); ++k) cells_[k].collect("cell" + std::to_string(k), out);
    out.emplace_back("classifier.w", classifier_w_);
    out.emplace_back("classifier.b", classifier_b_);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& t : parameters()) total += t.numel();
    return total;
  }

 private:
  SupernetConfig config_;
  Tensor stem_;
  search_space::BatchNorm stem_bn_;
  std::vector<EvalCell> cells_;
  Tensor classifier_w_;
  Tensor classifier_b_;
};

}  // namespace stretchnas::derivation
