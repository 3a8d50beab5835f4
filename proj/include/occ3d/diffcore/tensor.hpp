#pragma once

// Dense row-major tensors with tape-free reverse-mode gradients.
//
// The scalar type is fixed per build: define OCC3D_DIFF_DOUBLE for the float64
// flavor used by gradient checks. Each flavor lives in its own inline
// namespace so both libraries can coexist in one build tree.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#ifdef OCC3D_DIFF_DOUBLE
#define OCC3D_DIFF_NS f64
#else
#define OCC3D_DIFF_NS f32
#endif

namespace occ3d::diff {
inline namespace OCC3D_DIFF_NS {

#ifdef OCC3D_DIFF_DOUBLE
using Real = double;
#else
using Real = float;
#endif

struct ShapeMismatch : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct NonScalarOutput : std::logic_error {
  using std::logic_error::logic_error;
};
struct MissingGrad : std::logic_error {
  using std::logic_error::logic_error;
};

using Shape = std::vector<std::size_t>;

// 64-byte aligned storage. Vectorized Eigen kernels peel loops to the buffer
// alignment, so a fixed alignment keeps results independent of allocation.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using Buffer = std::vector<Real, AlignedAllocator<Real>>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Backward functions read node.grad and add into the grads of node.parents.
using BackwardFn = std::function<void(Node&)>;

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<NodePtr> parents;
  BackwardFn backward;

  // Grad buffer of a parent, allocated on demand; nullptr if it needs none.
  Real* parent_grad(std::size_t i);
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from(Shape shape, Buffer values, bool requires_grad = false);
  static Tensor from(Shape shape, std::span<const Real> values, bool requires_grad = false);
  static Tensor from(Shape shape, std::initializer_list<Real> values, bool requires_grad = false);
  static Tensor scalar(Real value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<Real> values() { return node_->value; }
  std::span<const Real> values() const { return node_->value; }
  Real* data() { return node_->value.data(); }
  const Real* data() const { return node_->value.data(); }
  Real item() const;

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<Real> grad() { return node_->grad; }
  std::span<const Real> grad() const { return node_->grad; }
  void zero_grad();

  // Accumulates d(this)/d(leaf) into every reachable leaf that requires grad.
  // Throws NonScalarOutput unless this tensor holds one element.
  void backward();

  Node& node() const { return *node_; }
  const NodePtr& ptr() const { return node_; }

 private:
  NodePtr node_;
};

bool grad_enabled();

// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Builds an op output. Parents and the backward function are only recorded
// when grad mode is on and some parent requires grad.
Tensor make_result(Shape shape, Buffer value, std::vector<Tensor> parents, BackwardFn backward);

}  // namespace OCC3D_DIFF_NS
}  // namespace occ3d::diff
