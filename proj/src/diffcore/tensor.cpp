#include "occ3d/diffcore/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <unordered_set>

namespace occ3d::diff {
inline namespace OCC3D_DIFF_NS {

namespace {
thread_local bool t_grad_enabled = true;
}

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "x" : "") + std::to_string(shape[i]);
  return s + "]";
}

Real* Node::parent_grad(std::size_t i) {
  Node& p = *parents[i];
  if (!p.requires_grad) return nullptr;
  if (p.grad.size() != p.value.size()) p.grad.assign(p.value.size(), Real(0));
  return p.grad.data();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), Real(0), requires_grad); }

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value.assign(numel(shape), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::span<const Real> values, bool requires_grad) {
  return from(std::move(shape), Buffer(values.begin(), values.end()), requires_grad);
}

Tensor Tensor::from(Shape shape, std::initializer_list<Real> values, bool requires_grad) {
  return from(std::move(shape), Buffer(values), requires_grad);
}

Tensor Tensor::from(Shape shape, Buffer values, bool requires_grad) {
  if (values.size() != numel(shape)) {
    throw ShapeMismatch("value count " + std::to_string(values.size()) + " does not match shape " + shape_string(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(Real value) { return from({1}, {value}); }

Real Tensor::item() const {
  if (size() != 1) throw NonScalarOutput("item() on a tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), Real(0));
}

void Tensor::backward() {
  if (size() != 1) throw NonScalarOutput("backward() needs a scalar output, got " + shape_string(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->leaf) n->grad.assign(n->value.size(), Real(0));
  }
  if (node_->grad.size() != 1) node_->grad.assign(1, Real(0));
  node_->grad[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->leaf && n->backward) n->backward(*n);
  }
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

Tensor make_result(Shape shape, Buffer value, std::vector<Tensor> parents, BackwardFn backward) {
  auto node = std::make_shared<Node>();
  if (value.size() != numel(shape)) throw ShapeMismatch("op produced a value buffer of the wrong size");
  node->shape = std::move(shape);
  node->value = std::move(value);
  const bool track =
      t_grad_enabled && std::any_of(parents.begin(), parents.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (track) {
    node->requires_grad = true;
    node->leaf = false;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.ptr());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

}  // namespace OCC3D_DIFF_NS
}  // namespace occ3d::diff
