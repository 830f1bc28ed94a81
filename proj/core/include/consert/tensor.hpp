#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace consert {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major float32 array with an optional gradient buffer.
///
/// Tensor is a cheap handle: copies share storage. Use clone() for a deep
/// copy. Values produced by Tape operations are not modified afterwards;
/// only leaves (parameters, inputs under test) are mutated in place.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> values,
                     bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);
  /// Scalar that also keeps the unrounded double it was computed from.
  static Tensor wide_scalar(double value);

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<const float> data() const;
  std::span<float> mutable_data();
  float item() const;
  /// The double kept by wide_scalar, else item().
  double wide_item() const;
  float at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  /// Gradient buffer; allocated as zeros on first access.
  std::span<float> grad() const;
  void zero_grad();

  Tensor clone() const;
  /// Same values, no gradient tracking, independent storage.
  Tensor detached_copy() const { return clone_with(false); }
  Tensor clone_with(bool requires_grad) const;

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  struct Node {
    Shape shape;
    std::vector<float> values;
    std::vector<float> gradient;
    bool requires_grad = false;
    bool has_wide = false;
    double wide = 0.0;
  };

  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  std::shared_ptr<Node> node_;
};

}  // namespace consert
