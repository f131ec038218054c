#pragma once

// Dense tensors with an optional reverse-mode gradient graph.
//
// A Tensor<T> is a cheap-to-copy handle: the value buffer is shared and
// treated as immutable once an op has produced it. Leaves created with
// requires_grad(true) own a graph node that accumulates gradients; every op
// whose inputs need gradients records a node holding its parents and a
// backward closure. backward() walks the recorded graph in reverse
// topological order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace quadnet {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int e : s) {
    if (e < 0) throw Error("negative extent in shape " + to_string(s));
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

// Thread-local switch that suppresses graph recording (evaluation, optimizer
// updates, data generation).
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set(bool on) { flag() = on; }

 private:
  static bool& flag() {
    thread_local bool on = true;
    return on;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {

template <class T>
struct Node {
  std::size_t size = 0;
  std::vector<T> grad;  // allocated on first accumulation
  std::vector<std::shared_ptr<Node>> parents;  // nullptr where no grad needed
  std::function<void(Node&)> backward;
  bool leaf = false;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(size, T(0));
    return grad;
  }
  // Gradient buffer of parent i, or nullptr when that input needs no gradient.
  T* parent_grad(std::size_t i) {
    auto& p = parents[i];
    return p ? p->grad_buffer().data() : nullptr;
  }
};

}  // namespace detail

template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() : data_(std::make_shared<std::vector<T>>()) {}

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(numel(shape_), fill)) {}

  Tensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)),
        data_(std::make_shared<std::vector<T>>(std::move(values))) {
    if (data_->size() != numel(shape_)) {
      throw Error("tensor data length " + std::to_string(data_->size()) +
                  " does not match shape " + to_string(shape_));
    }
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s), T(0)); }
  static Tensor ones(Shape s) { return Tensor(std::move(s), T(1)); }
  static Tensor full(Shape s, T v) { return Tensor(std::move(s), v); }
  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const {
    if (i < 0) i += ndim();
    if (i < 0 || i >= ndim()) throw Error("dimension index out of range for " + to_string(shape_));
    return shape_[static_cast<std::size_t>(i)];
  }
  std::size_t size() const { return data_->size(); }

  // Spans into a temporary would dangle once the full expression ends.
  std::span<const T> data() const& { return {data_->data(), data_->size()}; }
  std::span<const T> data() const&& = delete;
  const std::vector<T>& values() const& { return *data_; }
  std::vector<T> values() && { return *data_; }
  T operator[](std::size_t i) const { return (*data_)[i]; }
  T item() const {
    if (size() != 1) throw Error("item() on tensor of shape " + to_string(shape_));
    return (*data_)[0];
  }

  // In-place access. Only for leaves (parameters, buffers under construction);
  // mutating a tensor captured by a recorded graph invalidates its gradients.
  std::span<T> mutable_data() & { return {data_->data(), data_->size()}; }
  std::span<T> mutable_data() && = delete;

  // Deep copy of the values, detached from any graph.
  Tensor clone() const { return Tensor(shape_, *data_); }
  // Shares values but drops the graph link.
  Tensor detach() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = data_;
    return t;
  }
  // Same buffer reinterpreted with another shape of equal element count.
  Tensor reshape_values(Shape s) const {
    if (numel(s) != size()) {
      throw Error("cannot reshape " + to_string(shape_) + " to " + to_string(s));
    }
    Tensor t;
    t.shape_ = std::move(s);
    t.data_ = data_;
    t.node_ = node_;
    return t;
  }

  Tensor& requires_grad(bool on = true) {
    if (on) {
      if (!node_) {
        node_ = std::make_shared<detail::Node<T>>();
        node_->size = size();
        node_->leaf = true;
      }
    } else {
      node_.reset();
    }
    return *this;
  }
  bool needs_grad() const { return node_ != nullptr; }
  const NodePtr& node() const { return node_; }

  // Accumulated gradient (zeros if none has been accumulated yet).
  Tensor grad() const {
    if (!node_ || node_->grad.empty()) return Tensor(shape_, T(0));
    return Tensor(shape_, node_->grad);
  }
  void zero_grad() {
    if (node_) node_->grad.clear();
  }

  // Reverse pass from this tensor. A non-scalar root is seeded with ones.
  void backward() const;
  void backward(const Tensor& seed) const;

  // Used by op implementations.
  static Tensor make(Shape s, std::vector<T> v, NodePtr n) {
    Tensor t(std::move(s), std::move(v));
    t.node_ = std::move(n);
    return t;
  }

 private:
  Shape shape_;
  std::shared_ptr<std::vector<T>> data_;
  NodePtr node_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Records an op result. `backward` receives the result's node; it reads
// node.grad and accumulates into node.parent_grad(i) for each input i.
template <class T, class Backward>
Tensor<T> record(Shape shape, std::vector<T> values,
                 std::initializer_list<const Tensor<T>*> inputs, Backward&& backward) {
  bool any = false;
  if (GradMode::enabled()) {
    for (const auto* in : inputs) any = any || in->needs_grad();
  }
  if (!any) return Tensor<T>(std::move(shape), std::move(values));
  auto node = std::make_shared<detail::Node<T>>();
  node->size = values.size();
  node->parents.reserve(inputs.size());
  for (const auto* in : inputs) node->parents.push_back(in->node());
  node->backward = std::forward<Backward>(backward);
  return Tensor<T>::make(std::move(shape), std::move(values), std::move(node));
}

template <class T>
Tensor<T> record_many(Shape shape, std::vector<T> values, const std::vector<const Tensor<T>*>& inputs,
                      std::function<void(detail::Node<T>&)> backward) {
  bool any = false;
  if (GradMode::enabled()) {
    for (const auto* in : inputs) any = any || in->needs_grad();
  }
  if (!any) return Tensor<T>(std::move(shape), std::move(values));
  auto node = std::make_shared<detail::Node<T>>();
  node->size = values.size();
  for (const auto* in : inputs) node->parents.push_back(in->node());
  node->backward = std::move(backward);
  return Tensor<T>::make(std::move(shape), std::move(values), std::move(node));
}

template <class T>
void Tensor<T>::backward() const {
  backward(Tensor(shape_, T(1)));
}

template <class T>
void Tensor<T>::backward(const Tensor& seed) const {
  if (!node_) throw Error("backward() on a tensor that does not require grad");
  if (seed.size() != size()) {
    throw Error("backward seed shape " + to_string(seed.shape()) + " != " + to_string(shape_));
  }
  using N = detail::Node<T>;
  // Iterative post-order DFS gives parents before children; walk it reversed.
  // `order` holds owning references because releasing a node's parents below
  // may otherwise free nodes that are still to be visited.
  std::vector<NodePtr> order;
  std::unordered_set<N*> seen;
  std::vector<std::pair<NodePtr, std::size_t>> stack{{node_, 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.second < top.first->parents.size()) {
      NodePtr p = top.first->parents[top.second++];
      if (p && !seen.count(p.get())) {
        seen.insert(p.get());
        stack.emplace_back(std::move(p), 0);
      }
    } else {
      order.push_back(std::move(top.first));
      stack.pop_back();
    }
  }
  auto& g = node_->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    N* n = it->get();
    if (n->leaf || !n->backward) continue;
    if (!n->grad.empty()) n->backward(*n);
    // Interior nodes are single-use: release closures and gradients.
    n->backward = nullptr;
    n->parents.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
}

template <class T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.data().begin(), t.data().end(), [](T v) { return std::isfinite(v); });
}

template <class T, class U>
Tensor<U> cast(const Tensor<T>& t) {
  std::vector<U> v(t.size());
  std::transform(t.data().begin(), t.data().end(), v.begin(), [](T x) { return static_cast<U>(x); });
  return Tensor<U>(t.shape(), std::move(v));
}

}  // namespace quadnet
