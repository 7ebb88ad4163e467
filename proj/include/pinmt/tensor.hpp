#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace pinmt {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct GraphError : std::logic_error {
  using std::logic_error::logic_error;
};

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables tape recording for the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return leaf; }

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Dense row-major tensor handle. Copies share the underlying node, the way
/// autograd frameworks treat variables; use `clone()` for a deep copy.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (shape.empty()) shape = {1};
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    if (numel(shape) != values.size())
      throw ShapeError("shape " + shape_str(shape) + " holds " + std::to_string(numel(shape)) +
                       " values, got " + std::to_string(values.size()));
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return from(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T v, bool requires_grad = false) {
    const auto n = numel(shape);
    return from(std::move(shape), std::vector<T>(n, v), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t last_dim() const { return node_->shape.back(); }

  std::span<const T> values() const { return node_->value; }
  const T* data() const { return node_->value.data(); }

  /// Write access to leaf storage (parameter updates, checkpoint loads).
  std::span<T> mutable_values() {
    if (!node_->is_leaf()) throw GraphError("mutable access to a non-leaf tensor");
    return node_->value;
  }

  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  T operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->is_leaf()) throw GraphError("requires_grad can only be toggled on leaves");
    node_->requires_grad = on;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  /// Same values, no tape linkage.
  Tensor detach() const { return from(shape(), node_->value, false); }
  Tensor clone() const { return from(shape(), node_->value, requires_grad()); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

namespace detail {

/// Builds an op output; links it onto the tape only when an input needs grad.
template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<const Tensor<T>*> inputs,
                      const char* op, std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  n->leaf = false;
  if (grad_enabled()) {
    for (const Tensor<T>* in : inputs) {
      if (in->requires_grad()) {
        n->requires_grad = true;
        break;
      }
    }
  }
  if (n->requires_grad) {
    for (const Tensor<T>* in : inputs) n->parents.push_back(in->node_ptr());
    n->backward = std::move(backward);
  }
  return Tensor<T>(std::move(n));
}

template <class T>
Tensor<T> make_result(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs, const char* op,
                      std::function<void(Node<T>&)> backward) {
  auto n = std::make_shared<Node<T>>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  n->leaf = false;
  if (grad_enabled())
    n->requires_grad = std::any_of(inputs.begin(), inputs.end(), [](const auto& t) { return t.requires_grad(); });
  if (n->requires_grad) {
    for (const auto& in : inputs) n->parents.push_back(in.node_ptr());
    n->backward = std::move(backward);
  }
  return Tensor<T>(std::move(n));
}

/// Gradient buffer of a parent, or nullptr when that parent is off the tape.
template <class T>
T* grad_of(Node<T>& out, std::size_t parent) {
  Node<T>& p = *out.parents[parent];
  return p.requires_grad ? p.grad_buffer().data() : nullptr;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar output. Leaf gradients accumulate; interior
/// nodes are consumed so a second sweep over the same graph is refused.
template <class T>
void backward(const Tensor<T>& output) {
  if (!output.defined()) throw GraphError("backward on an undefined tensor");
  if (output.size() != 1)
    throw GraphError("backward needs a scalar output, got shape " + shape_str(output.shape()));
  Node<T>* root = output.node();
  if (!root->requires_grad) throw GraphError("backward on a detached graph (no input requires grad)");
  if (root->consumed) throw GraphError("backward already ran for this graph");

  // Iterative DFS post-order gives a topological order without recursion limits.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        if (p->consumed) throw GraphError("backward through an already consumed graph");
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->is_leaf()) continue;
    if (!n->grad.empty() && n->backward) n->backward(*n);
  }
  // Release the graph parents-first so every node in `order` outlives its use.
  for (Node<T>* n : order) {
    if (n->is_leaf()) continue;
    n->consumed = true;
    n->backward = nullptr;
    n->parents.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

}  // namespace pinmt
