#include "evosam/numkit/tape.hpp"

namespace evosam::nk {

const Tensor& Var::value() const {
  if (!valid()) throw std::logic_error("use of an unbound Var");
  return tape->value(id);
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, nullptr});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  bool needs = false;
  for (const Var& v : inputs) {
    if (v.tape != this) throw std::logic_error("op mixes Vars from different tapes");
    needs = needs || requires_grad(v.id);
  }
  nodes_.push_back(Node{std::move(value), Tensor{}, needs, needs ? std::move(fn) : nullptr});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
  bool needs = false;
  for (const Var& v : inputs) {
    if (v.tape != this) throw std::logic_error("op mixes Vars from different tapes");
    needs = needs || requires_grad(v.id);
  }
  nodes_.push_back(Node{std::move(value), Tensor{}, needs, needs ? std::move(fn) : nullptr});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::grad_acc(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Tape::backward(Var out) {
  if (out.value().size() != 1) {
    throw ShapeError("backward() without seed needs a scalar output, got " + shape_str(out.shape()));
  }
  backward(out, Tensor(out.shape(), real(1)));
}

void Tape::backward(Var out, const Tensor& seed) {
  if (out.tape != this) throw std::logic_error("backward on a foreign Var");
  if (seed.shape() != out.shape()) throw ShapeError("backward seed shape mismatch");
  for (auto& n : nodes_) n.grad = Tensor{};
  if (!requires_grad(out.id)) return;
  grad_acc(out.id) = seed;
  for (int i = out.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.backward && n.grad.size() != 0) n.backward(*this, i);
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id)];
  if (n.grad.size() != 0) return n.grad;
  return Tensor(n.value.shape());
}

}  // namespace evosam::nk
