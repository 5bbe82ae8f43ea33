#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "stretchnas/autodiff/ops.hpp"

namespace stretchnas::ad {

struct GradcheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst;  // "<tensor>[<index>]" of the largest relative error
  std::vector<double> rel_errors;
  bool passed = true;
};

// |a - n| / max(|a|, |n|, floor). The floor keeps coordinates whose true
// derivative is zero from dividing rounding noise by zero.
inline double gradcheck_relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Compares reverse-mode gradients of `loss_fn` with respect to each tensor in
/// `params` against central differences. `loss_fn` reads the parameters
/// through captured handles; this routine perturbs them in place and restores
/// them bit-exactly.
///
/// `stride` > 1 checks every stride-th coordinate of each tensor.
inline GradcheckReport gradcheck_tensors(const std::function<Tensor()>& loss_fn,
                                         std::vector<std::pair<std::string, Tensor>> params, double h,
                                         double tol, std::size_t stride = 1) {
  GradcheckReport report;
  Gradients grads;
  {
    Tape tape;
    TapeScope scope(tape);
    for (auto& [name, p] : params) p.set_requires_grad(true);
    Tensor loss = loss_fn();
    grads = backward(tape, loss);
  }
  NoGradScope no_grad;
  for (auto& [name, p] : params) {
    Tensor analytic = grads.of(p);
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); i += stride) {
      const Real saved = values[i];
      values[i] = saved + static_cast<Real>(h);
      const double up = loss_fn().item();
      values[i] = saved - static_cast<Real>(h);
      const double down = loss_fn().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[i];
      const double rel = gradcheck_relative_error(a, numeric);
      report.rel_errors.push_back(rel);
      report.max_abs_error = std::max(report.max_abs_error, std::abs(a - numeric));
      if (rel > report.max_rel_error || report.coordinates == 0) {
        if (rel >= report.max_rel_error) report.worst = name + "[" + std::to_string(i) + "]";
        report.max_rel_error = std::max(report.max_rel_error, rel);
      }
      ++report.coordinates;
    }
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

/// Gradient check of a scalar function of one tensor at `point`.
inline GradcheckReport gradcheck(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                                 double h = 1e-5, double tol = 1e-4) {
  require_finite(point, "gradcheck point");
  Tensor x = point.clone(true);
  return gradcheck_tensors([&] { return f(x); }, {{"x", x}}, h, tol);
}

}  // namespace stretchnas::ad
