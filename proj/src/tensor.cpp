#include "spx/tensor.hpp"

#include <numeric>

#include "spx/error.hpp"

namespace spx {

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("tensor data has " + std::to_string(data_.size()) + " elements but shape " +
                     shape_str(shape_) + " needs " + std::to_string(shape_numel(shape_)));
  }
}

double Tensor::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

const Tensor& Var::value() const { return tape_->value(id_); }

bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) { return push(Node{std::move(value), {}, false, {}, nullptr}); }

Var Tape::variable(Tensor value) { return push(Node{std::move(value), {}, true, {}, nullptr}); }

Var Tape::parameter(Parameter& param) { return push(Node{param.value, {}, true, {}, &param}); }

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  bool needs_grad = false;
  for (const Var& in : inputs) {
    if (in.tape() != this) throw ContractError("operation mixes values from different tapes");
    needs_grad = needs_grad || nodes_[in.id()].requires_grad;
  }
  Node node{std::move(value), {}, needs_grad, {}, nullptr};
  if (needs_grad) node.backward = std::move(backward);
  return push(std::move(node));
}

Tensor* Tape::grad_slot(Var v) {
  Node& node = nodes_.at(v.id());
  if (!node.requires_grad) return nullptr;
  if (node.grad.numel() != node.value.numel()) node.grad = Tensor(node.value.shape());
  return &node.grad;
}

Tensor Tape::grad(Var v) const {
  const Node& node = nodes_.at(v.id());
  if (node.grad.numel() == node.value.numel()) return node.grad;
  return Tensor(node.value.shape());
}

void Tape::backward(Var loss) {
  if (loss.tape() != this) throw ContractError("loss was recorded on a different tape");
  if (loss.value().numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  Tensor* seed = grad_slot(loss);
  if (seed == nullptr) return;
  (*seed)[0] += 1.0;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.requires_grad || node.grad.numel() != node.value.numel()) continue;
    if (node.backward) node.backward(*this, node.grad);
    if (node.sink != nullptr) {
      Tensor& sink = node.sink->grad;
      if (sink.numel() != node.grad.numel()) sink = Tensor(node.value.shape());
      for (std::size_t i = 0; i < sink.numel(); ++i) sink[i] += node.grad[i];
    }
  }
}

}  // namespace spx
