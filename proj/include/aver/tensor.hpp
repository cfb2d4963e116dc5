#pragma once

// Dense row-major tensor. Values are immutable after construction; copies
// share the underlying buffer. The optional grad buffer is filled in by
// Tape::backward for tensors registered as leaves, and is the one piece of
// shared mutable state a tensor carries.
//
// Element type is a template parameter: float is the production type, double
// is used by the finite-difference gradient tests.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <utility>
#include <vector>

#include "aver/errors.hpp"

namespace aver {

using NodeId = std::int32_t;
inline constexpr NodeId kNoNode = -1;

inline std::size_t numel_of(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    require(d > 0, "tensor shape must have positive dims, got ", shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

template <typename T>
class TensorT {
 public:
  TensorT() : TensorT({}, std::vector<T>(1, T(0))) {}

  TensorT(std::vector<int> shape, std::vector<T> data)
      : shape_(std::move(shape)),
        data_(std::make_shared<const std::vector<T>>(std::move(data))) {
    require(data_->size() == numel_of(shape_), "tensor data length ", data_->size(),
            " does not match shape ", shape_str(shape_));
  }

  static TensorT zeros(std::vector<int> shape) {
    const std::size_t n = numel_of(shape);
    return TensorT(std::move(shape), std::vector<T>(n, T(0)));
  }

  static TensorT full(std::vector<int> shape, T value) {
    const std::size_t n = numel_of(shape);
    return TensorT(std::move(shape), std::vector<T>(n, value));
  }

  static TensorT scalar(T value) { return TensorT({}, std::vector<T>(1, value)); }

  static TensorT from_vector(std::vector<T> v) {
    const int n = static_cast<int>(v.size());
    return TensorT({n}, std::move(v));
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const {
    require(axis >= 0 && axis < rank(), "axis ", axis, " out of range for ", shape_str(shape_));
    return shape_[static_cast<std::size_t>(axis)];
  }
  std::size_t numel() const { return data_->size(); }
  bool is_scalar() const { return numel() == 1; }

  const std::vector<T>& data() const { return *data_; }
  const std::shared_ptr<const std::vector<T>>& data_ptr() const { return data_; }

  T value() const {
    require(is_scalar(), "value() requires a scalar tensor, got ", shape_str(shape_));
    return (*data_)[0];
  }

  bool has_grad() const { return grad_ != nullptr; }

  const std::vector<T>& grad() const {
    require(has_grad(), "tensor has no gradient; run backward on a tape it is a leaf of");
    return *grad_;
  }

  // Lazily allocates the grad buffer; used by Tape::leaf and by tests.
  const std::shared_ptr<std::vector<T>>& grad_buffer() {
    if (!grad_) grad_ = std::make_shared<std::vector<T>>(numel(), T(0));
    return grad_;
  }

  void set_grad(std::vector<T> g) {
    require(g.size() == numel(), "gradient length does not match tensor");
    *grad_buffer() = std::move(g);
  }

  NodeId node() const { return node_; }
  bool tracked() const { return node_ != kNoNode; }
  std::uint64_t tape_serial() const { return tape_serial_; }

  // Copy bound to a tape node; values and grad buffer are shared.
  TensorT with_node(NodeId node, std::uint64_t tape_serial) const {
    TensorT t = *this;
    t.node_ = node;
    t.tape_serial_ = tape_serial;
    return t;
  }

  TensorT detached() const {
    TensorT t = *this;
    t.node_ = kNoNode;
    t.tape_serial_ = 0;
    return t;
  }

 private:
  std::vector<int> shape_;
  std::shared_ptr<const std::vector<T>> data_;
  std::shared_ptr<std::vector<T>> grad_;
  NodeId node_ = kNoNode;
  std::uint64_t tape_serial_ = 0;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

}  // namespace aver
