#pragma once

// Differentiable primitives. Every primitive validates shapes, rejects
// non-finite inputs, and appends a record to the active tape when any input
// requires a gradient.

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stretchnas/autodiff/tape.hpp"
#include "stretchnas/autodiff/tensor.hpp"

namespace stretchnas::ad {

namespace detail {

inline void check_inputs(std::string_view op, std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs) {
    if (!t->defined()) throw ContractError(std::string(op) + ": undefined input");
    if (!all_finite(t->data())) throw NumericError(std::string(op) + ": non-finite input");
  }
}

// Builds the output tensor and, if recording, the tape record. The backward
// rule is created lazily so nothing is captured when no tape is active.
template <class MakeBackward>
Tensor emit(std::string_view op, std::initializer_list<const Tensor*> inputs, Shape shape,
            std::vector<Real> data, MakeBackward&& make_backward) {
  if (!all_finite(data)) throw NumericError(std::string(op) + ": produced a non-finite value");
  Tape* tape = active_tape();
  bool record = false;
  if (tape != nullptr) {
    for (const Tensor* t : inputs) record = record || t->requires_grad();
  }
  Tensor out(std::move(shape), std::move(data), record);
  if (!record) return out;

  TapeRecord rec;
  rec.op = op;
  for (const Tensor* t : inputs) {
    rec.inputs.push_back(t->id());
    rec.input_needs_grad.push_back(t->requires_grad());
    rec.input_numel.push_back(t->numel());
  }
  rec.output = out.id();
  rec.output_numel = out.numel();
  rec.backward = make_backward(out);
  tape->append(std::move(rec));
  return out;
}

inline void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

inline void require_dim(std::string_view op, const Tensor& t, std::size_t dim) {
  if (t.dim() != dim) {
    throw ShapeError(std::string(op) + ": expected " + std::to_string(dim) + "-D input, got " +
                     shape_str(t.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_inputs("add", {&a, &b});
  detail::require_same_shape("add", a, b);
  std::vector<Real> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return detail::emit("add", {&a, &b}, a.shape(), std::move(out), [](const Tensor&) {
    return [](std::span<const Real> g, GradSlots& in) {
      for (auto* slot : in) {
        if (!slot) continue;
        for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i];
      }
    };
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_inputs("sub", {&a, &b});
  detail::require_same_shape("sub", a, b);
  std::vector<Real> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return detail::emit("sub", {&a, &b}, a.shape(), std::move(out), [](const Tensor&) {
    return [](std::span<const Real> g, GradSlots& in) {
      if (in[0]) for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i];
      if (in[1]) for (std::size_t i = 0; i < g.size(); ++i) (*in[1])[i] -= g[i];
    };
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_inputs("mul", {&a, &b});
  detail::require_same_shape("mul", a, b);
  std::vector<Real> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return detail::emit("mul", {&a, &b}, a.shape(), std::move(out), [a, b](const Tensor&) {
    return [a, b](std::span<const Real> g, GradSlots& in) {
      auto x = a.data(), y = b.data();
      if (in[0]) for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i] * y[i];
      if (in[1]) for (std::size_t i = 0; i < g.size(); ++i) (*in[1])[i] += g[i] * x[i];
    };
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::check_inputs("div", {&a, &b});
  detail::require_same_shape("div", a, b);
  std::vector<Real> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / y[i];
  return detail::emit("div", {&a, &b}, a.shape(), std::move(out), [a, b](const Tensor&) {
    return [a, b](std::span<const Real> g, GradSlots& in) {
      auto x = a.data(), y = b.data();
      if (in[0]) for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i] / y[i];
      if (in[1]) {
        for (std::size_t i = 0; i < g.size(); ++i) (*in[1])[i] -= g[i] * x[i] / (y[i] * y[i]);
      }
    };
  });
}

// c * a + d with constants c, d.
inline Tensor affine(const Tensor& a, Real c, Real d) {
  detail::check_inputs("affine", {&a});
  std::vector<Real> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x[i] + d;
  return detail::emit("affine", {&a}, a.shape(), std::move(out), [c](const Tensor&) {
    return [c](std::span<const Real> g, GradSlots& in) {
      for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += c * g[i];
    };
  });
}

inline Tensor scale(const Tensor& a, Real c) { return affine(a, c, Real{0}); }

// x * s where s holds a single element.
inline Tensor mul_scalar(const Tensor& x, const Tensor& s) {
  detail::check_inputs("mul_scalar", {&x, &s});
  if (s.numel() != 1) throw ShapeError("mul_scalar: factor must have one element, got " + shape_str(s.shape()));
  const Real factor = s.item();
  std::vector<Real> out(x.numel());
  auto xs = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xs[i] * factor;
  return detail::emit("mul_scalar", {&x, &s}, x.shape(), std::move(out), [x, factor](const Tensor&) {
    return [x, factor](std::span<const Real> g, GradSlots& in) {
      if (in[0]) for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i] * factor;
      if (in[1]) {
        auto xs = x.data();
        Real acc = 0;
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xs[i];
        (*in[1])[0] += acc;
      }
    };
  });
}

inline Tensor relu(const Tensor& a) {
  detail::check_inputs("relu", {&a});
  std::vector<Real> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0 ? x[i] : Real{0};
  return detail::emit("relu", {&a}, a.shape(), std::move(out), [a](const Tensor&) {
    return [a](std::span<const Real> g, GradSlots& in) {
      auto x = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x[i] > 0) (*in[0])[i] += g[i];
      }
    };
  });
}

inline Tensor exp(const Tensor& a) {
  detail::check_inputs("exp", {&a});
  std::vector<Real> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x[i]);
  return detail::emit("exp", {&a}, a.shape(), std::move(out), [](const Tensor& y) {
    return [y](std::span<const Real> g, GradSlots& in) {
      auto ys = y.data();
      for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i] * ys[i];
    };
  });
}

inline Tensor log(const Tensor& a) {
  detail::check_inputs("log", {&a});
  std::vector<Real> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(x[i]);
  return detail::emit("log", {&a}, a.shape(), std::move(out), [a](const Tensor&) {
    return [a](std::span<const Real> g, GradSlots& in) {
      auto x = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i] / x[i];
    };
  });
}

// ---------------------------------------------------------------------------
// Reductions and indexing
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
  detail::check_inputs("sum", {&a});
  Real acc = 0;
  for (Real v : a.data()) acc += v;
  return detail::emit("sum", {&a}, Shape{}, {acc}, [](const Tensor&) {
    return [](std::span<const Real> g, GradSlots& in) {
      for (auto& v : *in[0]) v += g[0];
    };
  });
}

inline Tensor mean(const Tensor& a) {
  detail::check_inputs("mean", {&a});
  Real acc = 0;
  for (Real v : a.data()) acc += v;
  const Real n = static_cast<Real>(a.numel());
  return detail::emit("mean", {&a}, Shape{}, {acc / n}, [n](const Tensor&) {
    return [n](std::span<const Real> g, GradSlots& in) {
      for (auto& v : *in[0]) v += g[0] / n;
    };
  });
}

// Flat element selection: out[k] = a[indices[k]].
inline Tensor gather(const Tensor& a, std::vector<std::size_t> indices) {
  detail::check_inputs("gather", {&a});
  if (indices.empty()) throw ContractError("gather: empty index list");
  std::vector<Real> out(indices.size());
  auto x = a.data();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= x.size()) throw ShapeError("gather: index out of range");
    out[k] = x[indices[k]];
  }
  Shape shape{indices.size()};
  return detail::emit("gather", {&a}, std::move(shape), std::move(out),
                      [idx = std::move(indices)](const Tensor&) {
                        return [idx](std::span<const Real> g, GradSlots& in) {
                          for (std::size_t k = 0; k < idx.size(); ++k) (*in[0])[idx[k]] += g[k];
                        };
                      });
}

// Maximum element; ties resolve to the lowest index, which also receives
// the whole subgradient.
inline Tensor max(const Tensor& a) {
  detail::check_inputs("max", {&a});
  auto x = a.data();
  std::size_t best = 0;
  for (std::size_t i = 1; i < x.size(); ++i) {
    if (x[i] > x[best]) best = i;
  }
  return detail::emit("max", {&a}, Shape{}, {x[best]}, [best](const Tensor&) {
    return [best](std::span<const Real> g, GradSlots& in) { (*in[0])[best] += g[0]; };
  });
}

// Softmax over the last axis, computed with a max shift.
inline Tensor softmax(const Tensor& a) {
  detail::check_inputs("softmax", {&a});
  if (a.dim() == 0) throw ShapeError("softmax: needs at least one axis");
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.numel() / cols;
  std::vector<Real> out(a.numel());
  auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* row = x.data() + r * cols;
    Real* dst = out.data() + r * cols;
    Real peak = *std::max_element(row, row + cols);
    Real total = 0;
    for (std::size_t c = 0; c < cols; ++c) total += dst[c] = std::exp(row[c] - peak);
    for (std::size_t c = 0; c < cols; ++c) dst[c] /= total;
  }
  return detail::emit("softmax", {&a}, a.shape(), std::move(out), [rows, cols](const Tensor& y) {
    return [y, rows, cols](std::span<const Real> g, GradSlots& in) {
      auto ys = y.data();
      for (std::size_t r = 0; r < rows; ++r) {
        Real dot = 0;
        for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * ys[r * cols + c];
        for (std::size_t c = 0; c < cols; ++c) {
          (*in[0])[r * cols + c] += ys[r * cols + c] * (g[r * cols + c] - dot);
        }
      }
    };
  });
}

/// Mean softmax cross-entropy of logits [B, K] against integer labels.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
  detail::check_inputs("cross_entropy", {&logits});
  detail::require_dim("cross_entropy", logits, 2);
  const std::size_t batch = logits.size(0), classes = logits.size(1);
  if (labels.size() != batch) throw ShapeError("cross_entropy: label count does not match batch");
  auto x = logits.data();
  std::vector<Real> probs(logits.numel());
  Real loss = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes) {
      throw ContractError("cross_entropy: label out of range");
    }
    const Real* row = x.data() + b * classes;
    Real peak = *std::max_element(row, row + classes);
    Real total = 0;
    for (std::size_t c = 0; c < classes; ++c) total += probs[b * classes + c] = std::exp(row[c] - peak);
    for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] /= total;
    loss -= row[labels[b]] - peak - std::log(total);
  }
  loss /= static_cast<Real>(batch);
  std::vector<int> targets(labels.begin(), labels.end());
  return detail::emit(
      "cross_entropy", {&logits}, Shape{}, {loss},
      [probs = std::move(probs), targets = std::move(targets), batch, classes](const Tensor&) {
        return [probs, targets, batch, classes](std::span<const Real> g, GradSlots& in) {
          const Real s = g[0] / static_cast<Real>(batch);
          for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t c = 0; c < classes; ++c) {
              Real d = probs[b * classes + c] - (static_cast<int>(c) == targets[b] ? Real{1} : Real{0});
              (*in[0])[b * classes + c] += s * d;
            }
          }
        };
      });
}

// ---------------------------------------------------------------------------
// Dense layers
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::check_inputs("matmul", {&a, &b});
  detail::require_dim("matmul", a, 2);
  detail::require_dim("matmul", b, 2);
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  if (b.size(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<Real> out(m * n, Real{0});
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const Real v = x[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += v * y[p * n + j];
    }
  return detail::emit("matmul", {&a, &b}, Shape{m, n}, std::move(out), [a, b, m, k, n](const Tensor&) {
    return [a, b, m, k, n](std::span<const Real> g, GradSlots& in) {
      auto x = a.data(), y = b.data();
      if (in[0]) {
        auto& ga = *in[0];
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            Real acc = 0;
            for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * y[p * n + j];
            ga[i * k + p] += acc;
          }
      }
      if (in[1]) {
        auto& gb = *in[1];
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const Real v = x[i * k + p];
            for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += v * g[i * n + j];
          }
      }
    };
  });
}

// x [B, K] + bias [K], broadcast over rows.
inline Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
  detail::check_inputs("add_rowwise", {&x, &bias});
  detail::require_dim("add_rowwise", x, 2);
  const std::size_t rows = x.size(0), cols = x.size(1);
  if (bias.numel() != cols) throw ShapeError("add_rowwise: bias length does not match columns");
  std::vector<Real> out(x.numel());
  auto xs = x.data(), bs = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xs[r * cols + c] + bs[c];
  return detail::emit("add_rowwise", {&x, &bias}, x.shape(), std::move(out), [rows, cols](const Tensor&) {
    return [rows, cols](std::span<const Real> g, GradSlots& in) {
      if (in[0]) for (std::size_t i = 0; i < g.size(); ++i) (*in[0])[i] += g[i];
      if (in[1]) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) (*in[1])[c] += g[r * cols + c];
      }
    };
  });
}

// ---------------------------------------------------------------------------
// Feature-map primitives, NCHW layout
// ---------------------------------------------------------------------------

struct Conv2dAttrs {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
  std::size_t groups = 1;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                   std::size_t padding, std::size_t dilation) {
  const std::size_t span = dilation * (kernel - 1) + 1;
  if (in + 2 * padding < span) throw ShapeError("convolution window larger than padded input");
  return (in + 2 * padding - span) / stride + 1;
}

/// Direct 2-D convolution. x [B, Cin, H, W], w [Cout, Cin/groups, KH, KW].
inline Tensor conv2d(const Tensor& x, const Tensor& w, Conv2dAttrs attrs = {}) {
  detail::check_inputs("conv2d", {&x, &w});
  detail::require_dim("conv2d", x, 4);
  detail::require_dim("conv2d", w, 4);
  const std::size_t batch = x.size(0), cin = x.size(1), h = x.size(2), wd = x.size(3);
  const std::size_t cout = w.size(0), cin_g = w.size(1), kh = w.size(2), kw = w.size(3);
  const std::size_t groups = attrs.groups;
  if (groups == 0 || cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g) {
    throw ShapeError("conv2d: channel/group mismatch input " + shape_str(x.shape()) + " kernel " +
                     shape_str(w.shape()));
  }
  const std::size_t stride = attrs.stride, pad = attrs.padding, dil = attrs.dilation;
  const std::size_t oh = conv_out_extent(h, kh, stride, pad, dil);
  const std::size_t ow = conv_out_extent(wd, kw, stride, pad, dil);
  const std::size_t cout_g = cout / groups;

  // Visits every (output, input, weight) index triple that contributes.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t co = 0; co < cout; ++co) {
        const std::size_t g = co / cout_g;
        for (std::size_t cl = 0; cl < cin_g; ++cl) {
          const std::size_t ci = g * cin_g + cl;
          for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const std::size_t widx = ((co * cin_g + cl) * kh + ky) * kw + kx;
              for (std::size_t oy = 0; oy < oh; ++oy) {
                const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky * dil) -
                                          static_cast<std::ptrdiff_t>(pad);
                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                const std::size_t xrow = ((b * cin + ci) * h + static_cast<std::size_t>(iy)) * wd;
                const std::size_t orow = ((b * cout + co) * oh + oy) * ow;
                for (std::size_t ox = 0; ox < ow; ++ox) {
                  const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx * dil) -
                                            static_cast<std::ptrdiff_t>(pad);
                  if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                  fn(orow + ox, xrow + static_cast<std::size_t>(ix), widx);
                }
              }
            }
        }
      }
  };

  std::vector<Real> out(batch * cout * oh * ow, Real{0});
  {
    auto xs = x.data(), ws = w.data();
    for_each_tap([&](std::size_t o, std::size_t i, std::size_t k) { out[o] += xs[i] * ws[k]; });
  }
  return detail::emit("conv2d", {&x, &w}, Shape{batch, cout, oh, ow}, std::move(out),
                      [x, w, for_each_tap](const Tensor&) {
                        return [x, w, for_each_tap](std::span<const Real> g, GradSlots& in) {
                          auto xs = x.data(), ws = w.data();
                          if (in[0] && in[1]) {
                            auto& gx = *in[0];
                            auto& gw = *in[1];
                            for_each_tap([&](std::size_t o, std::size_t i, std::size_t k) {
                              gx[i] += g[o] * ws[k];
                              gw[k] += g[o] * xs[i];
                            });
                          } else if (in[0]) {
                            auto& gx = *in[0];
                            for_each_tap([&](std::size_t o, std::size_t i, std::size_t k) { gx[i] += g[o] * ws[k]; });
                          } else if (in[1]) {
                            auto& gw = *in[1];
                            for_each_tap([&](std::size_t o, std::size_t i, std::size_t k) { gw[k] += g[o] * xs[i]; });
                          }
                        };
                      });
}

struct Pool2dAttrs {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
};

// Padding cells never win the max.
inline Tensor max_pool2d(const Tensor& x, Pool2dAttrs attrs = {}) {
  detail::check_inputs("max_pool2d", {&x});
  detail::require_dim("max_pool2d", x, 4);
  const std::size_t planes = x.size(0) * x.size(1), h = x.size(2), w = x.size(3);
  const std::size_t oh = conv_out_extent(h, attrs.kernel, attrs.stride, attrs.padding, 1);
  const std::size_t ow = conv_out_extent(w, attrs.kernel, attrs.stride, attrs.padding, 1);
  std::vector<Real> out(planes * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  auto xs = x.data();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        Real best = -std::numeric_limits<Real>::infinity();
        std::size_t best_idx = 0;
        for (std::size_t ky = 0; ky < attrs.kernel; ++ky)
          for (std::size_t kx = 0; kx < attrs.kernel; ++kx) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * attrs.stride + ky) - static_cast<std::ptrdiff_t>(attrs.padding);
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * attrs.stride + kx) - static_cast<std::ptrdiff_t>(attrs.padding);
            if (iy < 0 || ix < 0 || iy >= static_cast<std::ptrdiff_t>(h) || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            const std::size_t idx = (p * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix);
            if (xs[idx] > best) {
              best = xs[idx];
              best_idx = idx;
            }
          }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = best;
        argmax[o] = best_idx;
      }
  Shape shape{x.size(0), x.size(1), oh, ow};
  return detail::emit("max_pool2d", {&x}, std::move(shape), std::move(out),
                      [argmax = std::move(argmax)](const Tensor&) {
                        return [argmax](std::span<const Real> g, GradSlots& in) {
                          for (std::size_t o = 0; o < g.size(); ++o) (*in[0])[argmax[o]] += g[o];
                        };
                      });
}

// Averages over the in-bounds cells of each window.
inline Tensor avg_pool2d(const Tensor& x, Pool2dAttrs attrs = {}) {
  detail::check_inputs("avg_pool2d", {&x});
  detail::require_dim("avg_pool2d", x, 4);
  const std::size_t planes = x.size(0) * x.size(1), h = x.size(2), w = x.size(3);
  const std::size_t oh = conv_out_extent(h, attrs.kernel, attrs.stride, attrs.padding, 1);
  const std::size_t ow = conv_out_extent(w, attrs.kernel, attrs.stride, attrs.padding, 1);

  auto for_each_window = [=](auto&& fn) {
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          const std::size_t y0 = oy * attrs.stride, x0 = ox * attrs.stride;
          const std::size_t ylo = y0 > attrs.padding ? y0 - attrs.padding : 0;
          const std::size_t xlo = x0 > attrs.padding ? x0 - attrs.padding : 0;
          const std::size_t yhi = std::min(h, y0 + attrs.kernel - attrs.padding);
          const std::size_t xhi = std::min(w, x0 + attrs.kernel - attrs.padding);
          const Real count = static_cast<Real>((yhi - ylo) * (xhi - xlo));
          fn((p * oh + oy) * ow + ox, p, ylo, yhi, xlo, xhi, count);
        }
  };

  std::vector<Real> out(planes * oh * ow);
  auto xs = x.data();
  for_each_window([&](std::size_t o, std::size_t p, std::size_t ylo, std::size_t yhi, std::size_t xlo,
                      std::size_t xhi, Real count) {
    Real acc = 0;
    for (std::size_t iy = ylo; iy < yhi; ++iy)
      for (std::size_t ix = xlo; ix < xhi; ++ix) acc += xs[(p * h + iy) * w + ix];
    out[o] = acc / count;
  });
  Shape shape{x.size(0), x.size(1), oh, ow};
  return detail::emit("avg_pool2d", {&x}, std::move(shape), std::move(out), [for_each_window, h, w](const Tensor&) {
    return [for_each_window, h, w](std::span<const Real> g, GradSlots& in) {
      auto& gx = *in[0];
      for_each_window([&](std::size_t o, std::size_t p, std::size_t ylo, std::size_t yhi, std::size_t xlo,
                          std::size_t xhi, Real count) {
        const Real share = g[o] / count;
        for (std::size_t iy = ylo; iy < yhi; ++iy)
          for (std::size_t ix = xlo; ix < xhi; ++ix) gx[(p * h + iy) * w + ix] += share;
      });
    };
  });
}

// [B, C, H, W] -> [B, C]
inline Tensor global_avg_pool(const Tensor& x) {
  detail::check_inputs("global_avg_pool", {&x});
  detail::require_dim("global_avg_pool", x, 4);
  const std::size_t planes = x.size(0) * x.size(1), area = x.size(2) * x.size(3);
  std::vector<Real> out(planes);
  auto xs = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    Real acc = 0;
    for (std::size_t i = 0; i < area; ++i) acc += xs[p * area + i];
    out[p] = acc / static_cast<Real>(area);
  }
  Shape shape{x.size(0), x.size(1)};
  return detail::emit("global_avg_pool", {&x}, std::move(shape), std::move(out), [area](const Tensor&) {
    return [area](std::span<const Real> g, GradSlots& in) {
      for (std::size_t p = 0; p < g.size(); ++p) {
        const Real share = g[p] / static_cast<Real>(area);
        for (std::size_t i = 0; i < area; ++i) (*in[0])[p * area + i] += share;
      }
    };
  });
}

/// Concatenates [B, Ci, H, W] tensors along the channel axis.
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_channels: no inputs");
  for (const auto& t : parts) {
    detail::check_inputs("concat_channels", {&t});
    detail::require_dim("concat_channels", t, 4);
    if (t.size(0) != parts[0].size(0) || t.size(2) != parts[0].size(2) || t.size(3) != parts[0].size(3)) {
      throw ShapeError("concat_channels: batch/spatial mismatch " + shape_str(t.shape()) + " vs " +
                       shape_str(parts[0].shape()));
    }
  }
  const std::size_t batch = parts[0].size(0), area = parts[0].size(2) * parts[0].size(3);
  std::size_t channels = 0;
  std::vector<std::size_t> offsets;
  for (const auto& t : parts) {
    offsets.push_back(channels);
    channels += t.size(1);
  }
  std::vector<Real> out(batch * channels * area);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto xs = parts[k].data();
    const std::size_t ck = parts[k].size(1);
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(xs.data() + b * ck * area, ck * area, out.data() + (b * channels + offsets[k]) * area);
  }

  Tape* tape = active_tape();
  bool record = false;
  for (const auto& t : parts) record = record || t.requires_grad();
  record = record && tape != nullptr;
  Tensor result(Shape{batch, channels, parts[0].size(2), parts[0].size(3)}, std::move(out), record);
  if (!record) return result;

  TapeRecord rec;
  rec.op = "concat_channels";
  std::vector<std::size_t> sizes;
  for (const auto& t : parts) {
    rec.inputs.push_back(t.id());
    rec.input_needs_grad.push_back(t.requires_grad());
    rec.input_numel.push_back(t.numel());
    sizes.push_back(t.size(1));
  }
  rec.output = result.id();
  rec.output_numel = result.numel();
  rec.backward = [sizes, offsets, batch, channels, area](std::span<const Real> g, GradSlots& in) {
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      if (!in[k]) continue;
      auto& gk = *in[k];
      for (std::size_t b = 0; b < batch; ++b) {
        const Real* src = g.data() + (b * channels + offsets[k]) * area;
        Real* dst = gk.data() + b * sizes[k] * area;
        for (std::size_t i = 0; i < sizes[k] * area; ++i) dst[i] += src[i];
      }
    }
  };
  tape->append(std::move(rec));
  return result;
}

/// Per-channel normalisation with batch statistics followed by a learned
/// affine map. x [B, C, H, W], gamma [C], beta [C].
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps = Real(1e-5)) {
  detail::check_inputs("batch_norm", {&x, &gamma, &beta});
  detail::require_dim("batch_norm", x, 4);
  const std::size_t batch = x.size(0), channels = x.size(1), area = x.size(2) * x.size(3);
  if (gamma.numel() != channels || beta.numel() != channels) {
    throw ShapeError("batch_norm: affine parameters do not match channel count");
  }
  const Real count = static_cast<Real>(batch * area);
  auto xs = x.data(), gs = gamma.data(), bs = beta.data();
  std::vector<Real> xhat(x.numel()), inv_std(channels), out(x.numel());
  for (std::size_t c = 0; c < channels; ++c) {
    Real mu = 0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < area; ++i) mu += xs[(b * channels + c) * area + i];
    mu /= count;
    Real var = 0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < area; ++i) {
        const Real d = xs[(b * channels + c) * area + i] - mu;
        var += d * d;
      }
    var /= count;
    inv_std[c] = Real{1} / std::sqrt(var + eps);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < area; ++i) {
        const std::size_t idx = (b * channels + c) * area + i;
        xhat[idx] = (xs[idx] - mu) * inv_std[c];
        out[idx] = gs[c] * xhat[idx] + bs[c];
      }
  }
  return detail::emit(
      "batch_norm", {&x, &gamma, &beta}, x.shape(), std::move(out),
      [gamma, xhat = std::move(xhat), inv_std = std::move(inv_std), batch, channels, area, count](const Tensor&) {
        return [gamma, xhat, inv_std, batch, channels, area, count](std::span<const Real> g, GradSlots& in) {
          auto gs = gamma.data();
          for (std::size_t c = 0; c < channels; ++c) {
            Real sum_g = 0, sum_gx = 0;
            for (std::size_t b = 0; b < batch; ++b)
              for (std::size_t i = 0; i < area; ++i) {
                const std::size_t idx = (b * channels + c) * area + i;
                sum_g += g[idx];
                sum_gx += g[idx] * xhat[idx];
              }
            if (in[1]) (*in[1])[c] += sum_gx;
            if (in[2]) (*in[2])[c] += sum_g;
            if (in[0]) {
              const Real k = gs[c] * inv_std[c] / count;
              for (std::size_t b = 0; b < batch; ++b)
                for (std::size_t i = 0; i < area; ++i) {
                  const std::size_t idx = (b * channels + c) * area + i;
                  (*in[0])[idx] += k * (count * g[idx] - sum_g - xhat[idx] * sum_gx);
                }
            }
          }
        };
      });
}

// Sums a non-empty list of same-shape tensors left to right.
inline Tensor add_all(const std::vector<Tensor>& terms) {
  if (terms.empty()) throw ContractError("add_all: no terms");
  Tensor acc = terms.front();
  for (std::size_t k = 1; k < terms.size(); ++k) acc = add(acc, terms[k]);
  return acc;
}

}  // namespace stretchnas::ad
