#pragma once

#include <functional>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "stretchnas/autodiff/tensor.hpp"

namespace stretchnas::ad {

// Gradient buffers handed to a backward rule. Entry k is null when input k
// does not need a gradient.
using GradSlots = std::vector<std::vector<Real>*>;
using BackwardFn = std::function<void(std::span<const Real> grad_out, GradSlots& grad_in)>;

struct TapeRecord {
  std::string_view op;
  std::vector<std::uint64_t> inputs;
  std::vector<bool> input_needs_grad;
  std::vector<std::size_t> input_numel;
  std::uint64_t output = 0;
  std::size_t output_numel = 0;
  BackwardFn backward;
};

/// Ordered log of primitive applications. Records are appended in execution
/// order, so inputs always precede the outputs that consume them.
///
/// A tape is owned by one thread. Use TapeScope to make it the recording
/// target for primitives on the current thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  void append(TapeRecord record) { records_.push_back(std::move(record)); }
  const std::vector<TapeRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  void clear() { records_.clear(); }

 private:
  std::vector<TapeRecord> records_;
};

namespace detail {
inline Tape*& active_tape_slot() {
  thread_local Tape* tape = nullptr;
  return tape;
}
}  // namespace detail

inline Tape* active_tape() { return detail::active_tape_slot(); }

class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(detail::active_tape_slot()) {
    detail::active_tape_slot() = &tape;
  }
  ~TapeScope() { detail::active_tape_slot() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Disables recording for the current thread.
class NoGradScope {
 public:
  NoGradScope() : previous_(detail::active_tape_slot()) { detail::active_tape_slot() = nullptr; }
  ~NoGradScope() { detail::active_tape_slot() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

/// Result of a backward pass: gradient buffers keyed by tensor id.
class Gradients {
 public:
  bool has(const Tensor& t) const { return grads_.count(t.id()) != 0; }

  // Gradient of `t`, or zeros when the loss does not depend on it.
  Tensor of(const Tensor& t) const {
    auto it = grads_.find(t.id());
    if (it == grads_.end()) return Tensor::zeros(t.shape());
    return Tensor(t.shape(), it->second);
  }

  std::span<const Real> raw(const Tensor& t) const {
    auto it = grads_.find(t.id());
    if (it == grads_.end()) return {};
    return it->second;
  }

  std::unordered_map<std::uint64_t, std::vector<Real>>& buffers() { return grads_; }

 private:
  std::unordered_map<std::uint64_t, std::vector<Real>> grads_;
};

/// Reverse sweep over `tape` seeded with d(loss)/d(loss) = 1.
/// Gradients accumulate over fan-out.
inline Gradients backward(const Tape& tape, const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  Gradients result;
  auto& grads = result.buffers();
  grads[loss.id()] = std::vector<Real>{Real{1}};

  const auto& records = tape.records();
  GradSlots slots;
  for (auto it = records.rbegin(); it != records.rend(); ++it) {
    auto out = grads.find(it->output);
    if (out == grads.end()) continue;
    slots.assign(it->inputs.size(), nullptr);
    bool any = false;
    for (std::size_t k = 0; k < it->inputs.size(); ++k) {
      if (!it->input_needs_grad[k]) continue;
      any = true;
      // Node-based map: pointers stay valid across rehashing.
      auto& buffer = grads[it->inputs[k]];
      if (buffer.empty()) buffer.assign(it->input_numel[k], Real{0});
      slots[k] = &buffer;
    }
    if (!any) continue;
    it->backward(grads.at(it->output), slots);
  }
  return result;
}

}  // namespace stretchnas::ad
