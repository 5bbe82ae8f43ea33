#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "stretchnas/autodiff/tensor.hpp"
#include "stretchnas/errors.hpp"

namespace stretchnas::optimization {

using ad::Real;
using ad::Shape;
using ad::Tensor;

/// Labelled samples of one fixed shape (C, H, W), stored contiguously.
struct Dataset {
  Shape sample_shape;
  std::vector<Real> features;
  std::vector<int> labels;
  std::size_t n_classes = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_numel() const { return ad::shape_numel(sample_shape); }

  std::span<const Real> sample(std::size_t k) const {
    return std::span<const Real>(features).subspan(k * sample_numel(), sample_numel());
  }

  void push_back(std::span<const Real> x, int label) {
    if (x.size() != sample_numel()) throw ShapeError("sample size does not match dataset sample shape");
    features.insert(features.end(), x.begin(), x.end());
    labels.push_back(label);
  }

  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset out{sample_shape, {}, {}, n_classes};
    out.features.reserve(indices.size() * sample_numel());
    for (std::size_t k : indices) out.push_back(sample(k), labels.at(k));
    return out;
  }

  // Batch tensor [n, C, H, W] of the given samples.
  Tensor batch(std::span<const std::size_t> indices) const {
    std::vector<Real> data;
    data.reserve(indices.size() * sample_numel());
    for (std::size_t k : indices) {
      auto s = sample(k);
      data.insert(data.end(), s.begin(), s.end());
    }
    Shape shape{indices.size()};
    shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
    return Tensor(std::move(shape), std::move(data));
  }

  std::vector<int> batch_labels(std::span<const std::size_t> indices) const {
    std::vector<int> out;
    for (std::size_t k : indices) out.push_back(labels.at(k));
    return out;
  }

  bool operator==(const Dataset&) const = default;
};

struct Batch {
  Tensor x;
  std::vector<int> y;
};

inline Batch make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  return {data.batch(indices), data.batch_labels(indices)};
}

inline std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

struct SplitDatasets {
  Dataset train;
  Dataset val_alpha;
  Dataset val_beta;
};

/// Shuffled three-way partition. Sizes are round(n r0), round(n r1) and the
/// remainder.
inline SplitDatasets split_dataset(const Dataset& data, std::array<double, 3> ratios, std::uint64_t seed) {
  if (data.size() < 3) throw ContractError("split_dataset: need at least 3 samples, got " + std::to_string(data.size()));
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(total - 1.0) > 1e-9 || *std::min_element(ratios.begin(), ratios.end()) < 0) {
    throw ContractError("split_dataset: ratios must be non-negative and sum to 1");
  }
  const std::size_t n = data.size();
  auto idx = iota_indices(n);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const std::size_t n0 = std::min(n, static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios[0])));
  const std::size_t n1 = std::min(n - n0, static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios[1])));
  std::span<const std::size_t> all(idx);
  return {data.subset(all.subspan(0, n0)), data.subset(all.subspan(n0, n1)), data.subset(all.subspan(n0 + n1))};
}

// Concatenation of two datasets with the same sample shape.
inline Dataset concat(const Dataset& a, const Dataset& b) {
  if (a.sample_shape != b.sample_shape) throw ShapeError("concat: sample shapes differ");
  Dataset out = a;
  out.n_classes = std::max(a.n_classes, b.n_classes);
  out.features.insert(out.features.end(), b.features.begin(), b.features.end());
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

}  // namespace stretchnas::optimization
