#pragma once

#include <deque>
#include <functional>

#include "evosam/numkit/tensor.hpp"

namespace evosam::nk {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Records primitive ops during a forward pass and replays them in reverse to
/// accumulate gradients. One tape per forward/backward; discard afterwards.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records an op output. `fn` is kept only if some input needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn);

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id); }

  /// Seeds d(out)=1 (out must hold one element) and runs the reverse sweep.
  void backward(Var out);
  void backward(Var out, const Tensor& seed);

  /// Gradient of the last backward() with respect to `v`; zeros if none flowed.
  Tensor grad(Var v) const;

  // Used by op backward functions.
  const Tensor& grad_of(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  Tensor& grad_acc(int id);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::deque<Node> nodes_;
};

}  // namespace evosam::nk
