#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "stretchnas/errors.hpp"

namespace stretchnas::ad {

#ifdef STRETCHNAS_USE_FLOAT32
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

inline std::uint64_t next_tensor_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

struct TensorImpl {
  Shape shape;
  std::vector<Real> data;
  bool requires_grad = false;
  std::uint64_t id = next_tensor_id();
};

}  // namespace detail

/// Dense row-major array of `Real` with shared storage.
///
/// Copies share the underlying buffer; a Tensor that is not being recorded on
/// a tape is treated as an immutable value. Leaf parameters are the only
/// tensors mutated in place, and only by optimizers between steps.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<Real> data, bool requires_grad = false)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    for (auto extent : shape) {
      if (extent == 0) throw ShapeError("tensor extents must be positive: " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw ShapeError("data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<Real>(n, Real{0}), requires_grad);
  }

  static Tensor full(Shape shape, Real value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<Real>(n, value), requires_grad);
  }

  static Tensor scalar(Real value, bool requires_grad = false) {
    return Tensor(Shape{}, {value}, requires_grad);
  }

  static Tensor vector(std::vector<Real> values, bool requires_grad = false) {
    Shape shape{values.size()};
    return Tensor(std::move(shape), std::move(values), requires_grad);
  }

  bool defined() const noexcept { return static_cast<bool>(impl_); }
  explicit operator bool() const noexcept { return defined(); }

  const Shape& shape() const { return impl().shape; }
  std::size_t dim() const { return impl().shape.size(); }
  std::size_t size(std::size_t axis) const { return impl().shape.at(axis); }
  std::size_t numel() const { return impl().data.size(); }

  std::span<const Real> data() const { return impl().data; }
  // In-place access for leaves (parameter updates, initialisation).
  std::span<Real> mutable_data() { return impl().data; }
  const std::vector<Real>& values() const { return impl().data; }

  Real item() const {
    if (numel() != 1) throw ContractError("item() on tensor with shape " + shape_str(shape()));
    return impl().data[0];
  }
  Real operator[](std::size_t i) const { return impl().data[i]; }

  bool requires_grad() const { return defined() && impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl().requires_grad = flag; }
  std::uint64_t id() const { return impl().id; }

  // Deep copy with a fresh identity.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(shape(), impl().data, requires_grad);
  }

  friend bool same_tensor(const Tensor& a, const Tensor& b) { return a.impl_ == b.impl_; }

 private:
  detail::TensorImpl& impl() const {
    if (!impl_) throw ContractError("use of an undefined tensor");
    return *impl_;
  }

  std::shared_ptr<detail::TensorImpl> impl_;
};

inline bool all_finite(std::span<const Real> values) {
  return std::all_of(values.begin(), values.end(), [](Real v) { return std::isfinite(v); });
}

inline void require_finite(const Tensor& t, std::string_view where) {
  if (!all_finite(t.data())) {
    throw NumericError("non-finite value in " + std::string(where));
  }
}

}  // namespace stretchnas::ad
