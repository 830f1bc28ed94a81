#include "consert/tensor.hpp"

#include <sstream>

#include "consert/errors.hpp"

namespace consert {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->values.assign(shape_numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("Tensor::from: shape " + shape_to_string(shape) +
                         " does not hold " + std::to_string(values.size()) +
                         " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

Tensor Tensor::wide_scalar(double value) {
  Tensor t = scalar(static_cast<float>(value));
  t.node_->has_wide = true;
  t.node_->wide = value;
  return t;
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    throw DimensionError("Tensor::dim: axis " + std::to_string(axis) +
                         " out of range for shape " + shape_to_string(shape()));
  }
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->values.size(); }

std::span<const float> Tensor::data() const { return node_->values; }

std::span<float> Tensor::mutable_data() { return node_->values; }

float Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("Tensor::item on tensor of shape " +
                        shape_to_string(shape()));
  }
  return node_->values[0];
}

double Tensor::wide_item() const {
  const float v = item();
  return node_->has_wide ? node_->wide : static_cast<double>(v);
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool value) { node_->requires_grad = value; }

bool Tensor::has_grad() const { return !node_->gradient.empty(); }

std::span<float> Tensor::grad() const {
  if (node_->gradient.size() != node_->values.size()) {
    node_->gradient.assign(node_->values.size(), 0.0f);
  }
  return node_->gradient;
}

void Tensor::zero_grad() {
  node_->gradient.assign(node_->values.size(), 0.0f);
}

Tensor Tensor::clone() const { return clone_with(requires_grad()); }

Tensor Tensor::clone_with(bool requires_grad) const {
  auto node = std::make_shared<Node>();
  node->shape = node_->shape;
  node->values = node_->values;
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

}  // namespace consert
