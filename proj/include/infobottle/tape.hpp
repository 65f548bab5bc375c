#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "infobottle/tensor.hpp"

namespace infobottle {

// A named trainable array that outlives any single tape. Gradients from a
// tape are folded into `grad` with Tape::accumulate_param_grads.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Tensor v, bool train = true)
      : name(std::move(n)), value(std::move(v)), grad(value.shape, 0.0), trainable(train) {}

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }
};

class Tape;

// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  bool requires_grad() const;
};

// Define-by-run record of executed ops. Nodes are appended in execution
// order, so parents always precede children and a reverse sweep from the
// root is a valid topological order.
class Tape {
 public:
  // Receives the output gradient; must add into parent grads via grad_for().
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  // With record=false no backward closures are kept (inference mode).
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value, bool requires_grad = true);
  Var param(Parameter& p);

  // Appends an op output. requires_grad is inherited from the parents.
  Var push(Tensor value, std::vector<std::size_t> parents, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient of the most recent backward() root w.r.t. this node. Zero
  // tensor if the node did not receive any gradient.
  const Tensor& grad(Var v);

  // Mutable gradient accumulator used by backward closures. Returns nullptr
  // when the node does not require a gradient.
  Tensor* grad_for(std::size_t id);

  // Clears all node gradients, seeds d(root)/d(root) = 1 and sweeps back.
  // Repeatable: a second call with another root recomputes from scratch.
  void backward(Var root);

  // grad(parameter) += scale * node grad, for every parameter leaf.
  void accumulate_param_grads(double scale = 1.0);

  std::size_t size() const { return nodes_.size(); }
  bool recording() const { return record_; }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  bool record_;
  std::vector<Node> nodes_;
  Tensor empty_grad_;
};

}  // namespace infobottle
