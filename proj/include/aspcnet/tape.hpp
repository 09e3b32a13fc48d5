#ifndef ASPCNET_TAPE_HPP
#define ASPCNET_TAPE_HPP

#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "aspcnet/tensor.hpp"

namespace aspcnet {

/// Named trainable array with gradient and optimizer slots.
template <typename Scalar>
struct Param {
  std::string name;
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  Tensor<Scalar> adam_m, adam_v;

  Param() = default;
  Param(std::string n, Tensor<Scalar> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape) {}

  void zero_grad() { grad.fill(Scalar(0)); }
};

template <typename Scalar>
class Tape;

/// Handle to a recorded tensor; cheap to copy.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int node = -1;
  bool valid() const { return tape != nullptr && node >= 0; }
};

/// Reverse-mode tape. Ops append nodes in evaluation order, so every node's
/// inputs precede it; backward() sweeps the list once in reverse, accumulating
/// (never overwriting) into input gradients. Node values are immutable after
/// recording.
template <typename Scalar>
class Tape {
 public:
  // Called with the output node's value and accumulated gradient.
  using BackwardFn =
      std::function<void(Tape&, const Tensor<Scalar>&, const Tensor<Scalar>&)>;

  Var<Scalar> input(Tensor<Scalar> value, bool requires_grad = false) {
    return wrap(emit(std::move(value), requires_grad && grad_enabled_, nullptr));
  }

  Var<Scalar> constant(Tensor<Scalar> value) { return input(std::move(value), false); }

  /// Leaf node for a parameter; after backward() its gradient is accumulated
  /// into param.grad.
  Var<Scalar> param(Param<Scalar>& p) {
    int idx = emit(p.value, grad_enabled_, nullptr);
    if (grad_enabled_) param_leaves_.emplace_back(idx, &p);
    return wrap(idx);
  }

  int emit(Tensor<Scalar> value, bool requires_grad, BackwardFn backward) {
    if (debug_checks() && !value.all_finite())
      throw std::runtime_error("debug check: non-finite value produced by a primitive");
    nodes_.push_back(Node{std::move(value), Tensor<Scalar>(), requires_grad && grad_enabled_,
                          std::move(backward)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  Var<Scalar> wrap(int idx) { return Var<Scalar>{this, idx}; }

  const Tensor<Scalar>& value(Var<Scalar> v) const { return nodes_.at(v.node).value; }
  const Tensor<Scalar>& value(int idx) const { return nodes_.at(idx).value; }

  bool requires_grad(int idx) const { return nodes_.at(idx).requires_grad; }
  bool requires_grad(Var<Scalar> v) const { return requires_grad(v.node); }

  /// Gradient buffer for a node, allocated as zeros on first touch.
  Tensor<Scalar>& grad_buffer(int idx) {
    Node& n = nodes_.at(idx);
    if (n.grad.empty()) n.grad = Tensor<Scalar>(n.value.shape);
    return n.grad;
  }

  /// Gradient of a var after backward(); zeros if unreachable from the loss.
  Tensor<Scalar> grad(Var<Scalar> v) const {
    const Node& n = nodes_.at(v.node);
    if (n.grad.empty()) return Tensor<Scalar>(n.value.shape);
    return n.grad;
  }

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded backward rule once, in
  /// reverse recording order. Parameter leaf gradients are exported at the end.
  void backward(Var<Scalar> loss) {
    check(loss.valid() && loss.tape == this, "backward: loss not on this tape");
    check(nodes_.at(loss.node).value.size() == 1, "backward: loss must be scalar");
    grad_buffer(loss.node).fill(Scalar(1));
    for (int i = loss.node; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, n.value, n.grad);
    }
    for (auto& [idx, p] : param_leaves_) {
      const Node& n = nodes_[static_cast<std::size_t>(idx)];
      if (!n.grad.empty()) accumulate(p->grad, n.grad);
    }
  }

  std::size_t num_nodes() const { return nodes_.size(); }

  void clear() {
    nodes_.clear();
    param_leaves_.clear();
  }

 private:
  struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;  // empty until touched
    bool requires_grad = false;
    BackwardFn backward;  // null for leaves
  };

  std::deque<Node> nodes_;
  std::vector<std::pair<int, Param<Scalar>*>> param_leaves_;
  bool grad_enabled_ = true;
};

/// Central-difference gradient check for a scalar-valued tensor function.
/// Returns max over coordinates of |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12).
/// Meant to run with Scalar = double.
template <typename Scalar, typename Fn>
double finite_diff_check(Fn&& f, const Tensor<Scalar>& point, double step) {
  Tensor<Scalar> g_ad;
  {
    Tape<Scalar> tape;
    Var<Scalar> x = tape.input(point, true);
    Var<Scalar> loss = f(tape, x);
    check(tape.value(loss).size() == 1, "finite_diff_check: f must be scalar-valued");
    tape.backward(loss);
    g_ad = tape.grad(x);
  }
  auto eval = [&](const Tensor<Scalar>& at) -> double {
    Tape<Scalar> tape;
    tape.set_grad_enabled(false);
    Var<Scalar> x = tape.input(at, false);
    Var<Scalar> loss = f(tape, x);
    return static_cast<double>(tape.value(loss).data[0]);
  };
  double worst = 0.0;
  Tensor<Scalar> probe = point;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const Scalar orig = probe.data[i];
    probe.data[i] = orig + static_cast<Scalar>(step);
    double up = eval(probe);
    probe.data[i] = orig - static_cast<Scalar>(step);
    double down = eval(probe);
    probe.data[i] = orig;
    double g_fd = (up - down) / (2.0 * step);
    double g = static_cast<double>(g_ad.data[i]);
    double rel = std::abs(g - g_fd) / (std::abs(g) + std::abs(g_fd) + 1e-12);
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace aspcnet

#endif  // ASPCNET_TAPE_HPP
