#pragma once

#include <functional>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vqlogits/numerics/tensor.hpp"

namespace vqlogits {

// Records backward rules in forward order and replays them in reverse.
//
// Ops only record when the tape is enabled and at least one input requires a
// gradient, so a disabled tape doubles as an inference/no-grad context.
// Gradients accumulate additively; clear() is the only place they are zeroed.
template <typename T>
class Tape {
 public:
  explicit Tape(bool enabled = true) : enabled_(enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool enabled() const { return enabled_; }

  template <typename... Ts>
  bool should_record(const Ts&... inputs) const {
    return enabled_ && (inputs.requires_grad() || ...);
  }

  // Registers a backward rule producing `output` from `inputs`. Leaf inputs
  // (parameters) are remembered so clear() can reset their gradients.
  void record(Tensor<T>& output, std::initializer_list<Tensor<T>> inputs,
              std::function<void()> backward) {
    for (const auto& in : inputs) track_leaf(in);
    output.set_requires_grad(true);
    output.mark_non_leaf();
    entries_.push_back(std::move(backward));
  }

  void record(Tensor<T>& output, const std::vector<Tensor<T>>& inputs,
              std::function<void()> backward) {
    for (const auto& in : inputs) track_leaf(in);
    output.set_requires_grad(true);
    output.mark_non_leaf();
    entries_.push_back(std::move(backward));
  }

  // Seeds d(loss)/d(loss) = 1 and runs every recorded rule in reverse order.
  void backward(const Tensor<T>& loss) {
    if (loss.size() != 1) {
      throw DimensionError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
    }
    loss.grad()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

  // Drops every record and zeroes the gradients of the leaves it touched.
  // Parameter values are not modified.
  void clear() {
    for (const auto& leaf : leaves_) leaf.zero_grad();
    leaves_.clear();
    seen_.clear();
    entries_.clear();
  }

  std::size_t size() const { return entries_.size(); }

 private:
  void track_leaf(const Tensor<T>& t) {
    if (!t.defined() || !t.is_leaf() || !t.requires_grad()) return;
    if (seen_.insert(t.storage_id()).second) leaves_.push_back(t);
  }

  bool enabled_;
  std::vector<std::function<void()>> entries_;
  std::vector<Tensor<T>> leaves_;
  std::unordered_set<const void*> seen_;
};

}  // namespace vqlogits
