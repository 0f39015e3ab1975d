#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cuecan/error.hpp"
#include "cuecan/tensor.hpp"

namespace cuecan {

// A trainable tensor that outlives any single tape. `mask`, when present, has
// the same shape as `value`; zero entries are frozen at exactly 0.0.
struct Parameter {
  std::string name;
  Tensor4 value;
  Tensor4 grad;
  std::optional<Tensor4> mask;

  Parameter() = default;
  Parameter(std::string n, Tensor4 v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() {
    if (grad.shape() != value.shape()) grad = Tensor4(value.shape());
    grad.fill(0.0);
  }

  void apply_mask() {
    if (!mask) return;
    for (std::size_t i = 0; i < value.size(); ++i) {
      if ((*mask)[i] == 0.0) value[i] = 0.0;
    }
  }

  // Number of learnable (unmasked) scalars.
  std::size_t active_count() const {
    if (!mask) return value.size();
    std::size_t n = 0;
    for (double m : mask->data()) n += m != 0.0 ? 1 : 0;
    return n;
  }
};

class Tape;

// Handle to a node recorded on a Tape.
struct Var {
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

  Tape* tape = nullptr;
  std::size_t id = npos;

  bool valid() const { return tape != nullptr && id != npos; }
  const Tensor4& value() const;
  const Shape& shape() const { return value().shape(); }
};

// Record-replay reverse-mode autodiff. Nodes are appended in evaluation
// order, so the node vector is already topologically sorted; backward walks
// it once in reverse.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor4 value) { return push(std::move(value), false, nullptr, {}); }
  Var input(Tensor4 value, bool requires_grad = true) {
    return push(std::move(value), requires_grad, nullptr, {});
  }

  // Parameter leaf: its gradient is accumulated into p.grad by backward().
  Var param(Parameter& p) { return push(p.value, true, &p, {}); }

  // Used by ops. `fn` must only touch nodes with ids below `self`.
  Var record(Tensor4 value, bool requires_grad, BackwardFn fn) {
    if (!value.all_finite()) throw NumericError("non-finite value produced in forward pass");
    return push(std::move(value), requires_grad, nullptr, requires_grad ? std::move(fn) : BackwardFn{});
  }

  const Tensor4& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor4& value(Var v) const { return value(v.id); }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool requires_grad(Var v) const { return v.valid() && requires_grad(v.id); }

  // Gradient buffer of a node; zero-allocated on first access.
  Tensor4& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.grad.shape() != n.value.shape()) n.grad = Tensor4(n.value.shape());
    return n.grad;
  }
  Tensor4& grad(Var v) { return grad(v.id); }
  bool has_grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.grad.shape() == n.value.shape() && n.grad.size() > 0;
  }

  std::size_t size() const { return nodes_.size(); }
  std::size_t visited() const { return visited_; }

  void backward(Var root) {
    if (root.tape != this) throw InvariantError("backward: root belongs to a different tape");
    if (backward_done_) throw InvariantError("backward called twice on the same recording");
    if (value(root).size() != 1) {
      throw ShapeError("backward: root must be scalar, got " + value(root).shape().str());
    }
    backward_done_ = true;
    visited_ = 0;
    grad(root.id)[0] = 1.0;
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      ++visited_;
      if (n.backward) n.backward(*this, i);
      if (n.param != nullptr) accumulate_param(n);
    }
    for (const Node& n : nodes_) {
      if (n.param != nullptr && !n.param->grad.all_finite()) {
        throw NumericError("non-finite gradient for parameter '" + n.param->name + "'");
      }
    }
  }

  void clear() {
    nodes_.clear();
    backward_done_ = false;
    visited_ = 0;
  }

 private:
  struct Node {
    Tensor4 value;
    Tensor4 grad;
    bool requires_grad = false;
    Parameter* param = nullptr;
    BackwardFn backward;
  };

  Var push(Tensor4 value, bool requires_grad, Parameter* p, BackwardFn fn) {
    if (backward_done_) throw InvariantError("recording on a tape after backward; clear() it first");
    nodes_.push_back(Node{std::move(value), Tensor4{}, requires_grad, p, std::move(fn)});
    return Var{this, nodes_.size() - 1};
  }

  static void accumulate_param(Node& n) {
    Parameter& p = *n.param;
    if (p.grad.shape() != p.value.shape()) p.grad = Tensor4(p.value.shape());
    for (std::size_t k = 0; k < p.grad.size(); ++k) {
      if (p.mask && (*p.mask)[k] == 0.0) continue;
      p.grad[k] += n.grad[k];
    }
  }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
  std::size_t visited_ = 0;
};

inline const Tensor4& Var::value() const { return tape->value(id); }

}  // namespace cuecan
