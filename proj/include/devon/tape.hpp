#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "devon/tensor.hpp"

namespace devon {

/// Records one forward pass as an ordered list of operations, each carrying
/// an adjoint rule. Recording order is a topological order by construction,
/// so backward() replays the list once in reverse.
///
/// A tape is confined to one logical thread and discarded after backward().
/// Leaf gradients accumulate across backward() calls; gradients of recorded
/// intermediate outputs are reset at the start of each traversal so that the
/// leaf totals stay correct.
template <typename T>
class Tape {
 public:
  using ImplPtr = std::shared_ptr<detail::TensorImpl<T>>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// When disabled, ops skip recording and their outputs do not require
  /// gradients. Used for inference and finite-difference evaluations.
  void set_grad_enabled(bool v) { grad_enabled_ = v; }
  bool grad_enabled() const { return grad_enabled_; }

  void record(ImplPtr output, std::function<void()> backward_fn) {
    nodes_.push_back(Node{std::move(output), std::move(backward_fn)});
  }

  std::size_t size() const { return nodes_.size(); }

  /// Backward from a scalar-shaped root with seed gradient 1.
  void backward(const Tensor4<T>& root) {
    require(root.shape() == Shape4{1, 1, 1, 1},
            "backward: root must be scalar-shaped (1,1,1,1) unless a seed "
            "gradient is supplied, got " +
                root.shape().str());
    backward(root, std::vector<T>{T(1)});
  }

  void backward(const Tensor4<T>& root, const std::vector<T>& seed) {
    require(static_cast<std::int64_t>(seed.size()) == root.numel(),
            "backward: seed size does not match root shape");
    for (Node& n : nodes_) {
      n.output->ensure_grad();
      n.output->zero_grad();
    }
    auto ri = root.impl();
    ri->ensure_grad();
    for (std::size_t i = 0; i < seed.size(); ++i) ri->grad[i] += seed[i];
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      it->backward_fn();
    }
  }

 private:
  struct Node {
    ImplPtr output;
    std::function<void()> backward_fn;
  };
  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
};

namespace detail {

// Shared helper for op implementations: decide whether the result of an op
// over the given inputs participates in differentiation.
template <typename T, typename... Ins>
bool track_grad(const Tape<T>& tape, const Ins&... ins) {
  return tape.grad_enabled() && (ins.requires_grad() || ...);
}

}  // namespace detail

}  // namespace devon
