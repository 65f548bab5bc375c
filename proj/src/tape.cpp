#include "infobottle/tape.hpp"

#include <stdexcept>

namespace infobottle {

const Tensor& Var::value() const { return tape->value(id); }
bool Var::requires_grad() const { return tape->requires_grad(id); }

Var Tape::constant(Tensor value) { return leaf(std::move(value), false); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad && record_;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Tape::param(Parameter& p) {
  Var v = leaf(p.value, p.trainable);
  if (p.trainable && record_) nodes_[v.id].param = &p;
  return v;
}

Var Tape::push(Tensor value, std::vector<std::size_t> parents, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (auto p : parents) {
      if (nodes_.at(p).requires_grad) n.requires_grad = true;
    }
    if (n.requires_grad) {
      n.parents = std::move(parents);
      n.backward = std::move(backward);
    }
  }
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

const Tensor& Tape::grad(Var v) {
  Node& n = nodes_.at(v.id);
  if (!n.has_grad) {
    empty_grad_ = Tensor(n.value.shape, 0.0);
    return empty_grad_;
  }
  return n.grad;
}

Tensor* Tape::grad_for(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return nullptr;
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape, 0.0);
    n.has_grad = true;
  }
  return &n.grad;
}

void Tape::backward(Var root) {
  if (root.tape != this) throw std::invalid_argument("backward: root belongs to another tape");
  if (nodes_.at(root.id).value.size() != 1) {
    throw std::invalid_argument("backward: root must be scalar, got " + shape_str(nodes_[root.id].value.shape));
  }
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  Tensor* seed = grad_for(root.id);
  if (seed == nullptr) return;
  seed->data[0] = 1.0;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, n.grad);
  }
}

void Tape::accumulate_param_grads(double scale) {
  for (auto& n : nodes_) {
    if (n.param == nullptr || !n.has_grad) continue;
    auto& dst = n.param->grad.data;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * n.grad.data[i];
  }
}

}  // namespace infobottle
