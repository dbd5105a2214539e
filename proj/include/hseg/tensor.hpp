#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "hseg/real.hpp"

namespace hseg {

// Tensor extents. Image-like data uses (batch, channels, height, width).
using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);
bool same_shape(const Shape& a, const Shape& b);

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<real_t> value;
  std::vector<real_t> grad;  // empty until a backward pass populates it
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Accumulates this node's grad into its parents' grads. Unset on leaves.
  std::function<void(TensorNode&)> backward_fn;

  void ensure_grad();
};

}  // namespace detail

// Value-semantic handle to a node of the autodiff graph. Tensors written by
// an op are treated as immutable; `values()` mutation is reserved for leaves
// (parameters, buffers, inputs under construction).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, real_t v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<real_t> values, bool requires_grad = false);
  static Tensor scalar(real_t v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int dim(int i) const;
  int64_t numel() const;

  bool requires_grad() const;
  void set_requires_grad(bool v);

  std::vector<real_t>& values();
  const std::vector<real_t>& values() const;

  bool has_grad() const;
  std::vector<real_t>& grad();
  const std::vector<real_t>& grad() const;
  void zero_grad();  // drops the grad buffer

  real_t item() const;  // scalar tensors only

  std::shared_ptr<detail::TensorNode> node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::TensorNode> n);

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

// Populates gradients of `loss` w.r.t. every requires_grad ancestor. The
// graph is walked in reverse topological order, each node exactly once.
// Rejects non-scalar losses.
void backward(const Tensor& loss);

// While a guard is alive, ops do not record backward closures; forwards are
// value-only. Used for evaluation and for decision (argmax) paths.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

}  // namespace hseg
