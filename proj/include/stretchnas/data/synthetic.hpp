#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <string_view>

#include "stretchnas/optimization/dataset.hpp"

namespace stretchnas::data {

using optimization::Dataset;
using optimization::Real;

enum class Generator { TwoRings, XorGrid, GaussianBlobs, TinyImages };

inline std::string_view to_string(Generator g) {
  switch (g) {
    case Generator::TwoRings: return "two-rings";
    case Generator::XorGrid: return "xor-grid";
    case Generator::GaussianBlobs: return "gaussian-blobs";
    case Generator::TinyImages: return "tiny-images";
  }
  return "?";
}

inline Generator parse_generator(std::string_view name) {
  for (auto g : {Generator::TwoRings, Generator::XorGrid, Generator::GaussianBlobs, Generator::TinyImages})
    if (to_string(g) == name) return g;
  throw ConfigError("unknown generator '" + std::string(name) + "'");
}

struct SyntheticSpec {
  Generator generator = Generator::TwoRings;
  std::size_t n_samples = 2000;
  double noise = 0.1;
  std::size_t n_classes = 2;
  std::size_t image_size = 8;  // tiny-images only
};

/// Labels cycle 0, 1, ..., K-1 so class counts differ by at most one.
/// Point generators emit (2, 1, 1) samples; tiny-images emits (1, S, S).
inline Dataset generate(const SyntheticSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double two_pi = 2.0 * std::numbers::pi;
  Dataset out;
  std::size_t classes = spec.n_classes;
  if (spec.generator == Generator::TwoRings || spec.generator == Generator::XorGrid) classes = 2;
  if (classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  out.n_classes = classes;
  out.sample_shape = spec.generator == Generator::TinyImages ? ad::Shape{1, spec.image_size, spec.image_size}
                                                              : ad::Shape{2, 1, 1};
  std::vector<Real> x(out.sample_numel());
  for (std::size_t n = 0; n < spec.n_samples; ++n) {
    const int label = static_cast<int>(n % classes);
    switch (spec.generator) {
      case Generator::TwoRings: {
        const double radius = 1.0 + label + spec.noise * gauss(rng);
        const double angle = two_pi * unit(rng);
        x[0] = static_cast<Real>(radius * std::cos(angle));
        x[1] = static_cast<Real>(radius * std::sin(angle));
        break;
      }
      case Generator::XorGrid: {
        // Quadrants with matching signs are class 0.
        const double sx = unit(rng) < 0.5 ? -1.0 : 1.0;
        const double sy = label == 0 ? sx : -sx;
        x[0] = static_cast<Real>(sx * (0.1 + 0.9 * unit(rng)) + spec.noise * gauss(rng));
        x[1] = static_cast<Real>(sy * (0.1 + 0.9 * unit(rng)) + spec.noise * gauss(rng));
        break;
      }
      case Generator::GaussianBlobs: {
        const double angle = two_pi * label / static_cast<double>(classes);
        x[0] = static_cast<Real>(2.0 * std::cos(angle) + spec.noise * gauss(rng));
        x[1] = static_cast<Real>(2.0 * std::sin(angle) + spec.noise * gauss(rng));
        break;
      }
      case Generator::TinyImages: {
        // Stripes whose orientation encodes the class, random phase.
        const double theta = std::numbers::pi * label / static_cast<double>(classes);
        const double phase = two_pi * unit(rng);
        const double freq = 2.0 / static_cast<double>(spec.image_size);
        for (std::size_t r = 0; r < spec.image_size; ++r) {
          for (std::size_t c = 0; c < spec.image_size; ++c) {
            const double t = std::cos(theta) * static_cast<double>(c) + std::sin(theta) * static_cast<double>(r);
            const double v = 0.5 + 0.5 * std::sin(two_pi * freq * t + phase) + spec.noise * gauss(rng);
            x[r * spec.image_size + c] = static_cast<Real>(std::clamp(v, 0.0, 1.0));
          }
        }
        break;
      }
    }
    out.push_back(x, label);
  }
  return out;
}

}  // namespace stretchnas::data
