#include "hseg/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "hseg/util.hpp"

namespace hseg {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream ss;
  ss << "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) ss << "x";
    ss << s[i];
  }
  ss << ")";
  return ss.str();
}

bool same_shape(const Shape& a, const Shape& b) {
  return a == b;
}

namespace detail {

void TensorNode::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), real_t(0));
}

}  // namespace detail

static thread_local bool g_grad_enabled = true;

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) {
  g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() {
  g_grad_enabled = prev_;
}

bool grad_enabled() {
  return g_grad_enabled;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = std::make_shared<detail::TensorNode>();
  n->shape = std::move(shape);
  n->value.assign(static_cast<size_t>(shape_numel(n->shape)), real_t(0));
  n->requires_grad = requires_grad;
  return wrap(std::move(n));
}

Tensor Tensor::full(Shape shape, real_t v, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.values().begin(), t.values().end(), v);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<real_t> values, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw Error(strprintf("tensor value count %zu does not match shape %s", values.size(),
                          shape_str(shape).c_str()));
  }
  auto n = std::make_shared<detail::TensorNode>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return wrap(std::move(n));
}

Tensor Tensor::scalar(real_t v, bool requires_grad) {
  return from({1}, {v}, requires_grad);
}

const Shape& Tensor::shape() const {
  return node_->shape;
}

int Tensor::dim(int i) const {
  return node_->shape.at(static_cast<size_t>(i));
}

int64_t Tensor::numel() const {
  return static_cast<int64_t>(node_->value.size());
}

bool Tensor::requires_grad() const {
  return node_ && node_->requires_grad;
}

void Tensor::set_requires_grad(bool v) {
  node_->requires_grad = v;
}

std::vector<real_t>& Tensor::values() {
  return node_->value;
}

const std::vector<real_t>& Tensor::values() const {
  return node_->value;
}

bool Tensor::has_grad() const {
  return node_ && !node_->grad.empty();
}

std::vector<real_t>& Tensor::grad() {
  return node_->grad;
}

const std::vector<real_t>& Tensor::grad() const {
  return node_->grad;
}

void Tensor::zero_grad() {
  node_->grad.clear();
}

real_t Tensor::item() const {
  if (numel() != 1) {
    throw Error(strprintf("item() requires a scalar tensor, got shape %s",
                          shape_str(shape()).c_str()));
  }
  return node_->value[0];
}

Tensor Tensor::wrap(std::shared_ptr<detail::TensorNode> n) {
  Tensor t;
  t.node_ = std::move(n);
  return t;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw Error("backward: undefined tensor");
  if (loss.numel() != 1) {
    throw Error(strprintf("backward requires a scalar loss, got shape %s",
                          shape_str(loss.shape()).c_str()));
  }

  using Node = detail::TensorNode;
  // Iterative DFS post-order so each node is processed exactly once.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  Node* root = loss.node().get();
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next_child] = stack.back();
    if (next_child < node->parents.size()) {
      Node* child = node->parents[next_child++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] = real_t(1);
  // order is post-order: parents-before-children when read in reverse.
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->requires_grad) continue;
    node->ensure_grad();
    if (node->backward_fn) node->backward_fn(*node);
  }
}

}  // namespace hseg
