#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <unordered_map>
#include <unordered_set>

#include "fcbfuse/common.hpp"

namespace fcbfuse {

template <typename T>
struct TensorNode;
template <typename T>
struct BackwardCtx;

// Transient gradient-flow buffers used during one backward replay. Gradients
// of intermediate nodes live here and are discarded afterwards; only leaves
// accumulate into their persistent grad buffer.
template <typename T>
struct BackwardCtx {
  std::unordered_map<const TensorNode<T>*, std::vector<T>> flow;

  std::vector<T>& buf(const std::shared_ptr<TensorNode<T>>& n) {
    auto& v = flow[n.get()];
    if (v.empty()) v.assign(n->values.size(), T(0));
    return v;
  }
};

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // leaves only; allocated on first use
  bool requires_grad = false;
  uint64_t version = 0;  // bumped whenever values are rewritten
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode<T>>> inputs;
  // Re-executes the forward kernel against the inputs' current values.
  std::function<void(TensorNode<T>&)> recompute;
  // Accumulates input gradients given this node's output gradient.
  std::function<void(const TensorNode<T>&, const std::vector<T>&, BackwardCtx<T>&)> backprop;

  int64_t numel() const { return static_cast<int64_t>(values.size()); }
  void bump() { ++version; }
};

bool grad_enabled();
void set_grad_enabled(bool on);

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_enabled()) { set_grad_enabled(false); }
  ~NoGradGuard() { set_grad_enabled(prev); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Value-semantics handle to a shared tensor node.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode<T>> n) : n_(std::move(n)) {}

  static Tensor uninit(Shape s) {
    auto n = std::make_shared<TensorNode<T>>();
    int64_t count = fcbfuse::numel(s);
    check(count > 0, "tensor shape " + shape_str(s) + " has non-positive extent");
    n->shape = std::move(s);
    n->values.resize(static_cast<size_t>(count));
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape s) {
    Tensor t = uninit(std::move(s));
    std::fill(t.values().begin(), t.values().end(), T(0));
    return t;
  }
  static Tensor full(Shape s, T v) {
    Tensor t = uninit(std::move(s));
    std::fill(t.values().begin(), t.values().end(), v);
    return t;
  }
  static Tensor from(Shape s, std::vector<T> data) {
    check(fcbfuse::numel(s) == static_cast<int64_t>(data.size()),
          "data length does not match shape " + shape_str(s));
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(s);
    n->values = std::move(data);
    return Tensor(std::move(n));
  }
  static Tensor scalar(T v) { return from({1}, {v}); }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int64_t numel() const { return n_->numel(); }
  int64_t dim(size_t i) const { return n_->shape[i]; }
  size_t ndim() const { return n_->shape.size(); }

  std::vector<T>& values() { return n_->values; }
  const std::vector<T>& values() const { return n_->values; }
  T* data() { return n_->values.data(); }
  const T* data() const { return n_->values.data(); }

  T item() const {
    check(numel() == 1, "item() on non-scalar tensor " + shape_str(shape()));
    return n_->values[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    n_->requires_grad = on;
    return *this;
  }

  // Persistent gradient buffer (leaf tensors). Allocated zeroed on demand.
  std::vector<T>& grad() {
    if (n_->grad.empty()) n_->grad.assign(n_->values.size(), T(0));
    return n_->grad;
  }
  const std::vector<T>* grad_if() const { return n_->grad.empty() ? nullptr : &n_->grad; }
  bool has_grad() const { return !n_->grad.empty(); }
  void zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), T(0));
  }

  std::shared_ptr<TensorNode<T>>& node() { return n_; }
  const std::shared_ptr<TensorNode<T>>& node() const { return n_; }

  // Deep copy of the values; the copy is a fresh leaf.
  Tensor clone_detached() const {
    Tensor t = from(shape(), values());
    t.n_->requires_grad = n_->requires_grad;
    return t;
  }

 private:
  std::shared_ptr<TensorNode<T>> n_;
};

// Ordered record list of the computation producing `root`: inputs always
// precede the nodes consuming them. One backward() replays every record
// exactly once, accumulating d(root)/d(leaf) into leaf grads additively.
template <typename T>
class Tape {
 public:
  explicit Tape(const Tensor<T>& root) : root_(root.node()) {
    check(root.numel() == 1, "backward root must be scalar, got " + shape_str(root.shape()));
    if (!root_->requires_grad) return;  // nothing reachable requires grad
    // Iterative post-order DFS over grad-requiring ancestors.
    std::unordered_set<const TensorNode<T>*> seen;
    std::vector<std::pair<std::shared_ptr<TensorNode<T>>, size_t>> stack;
    stack.push_back({root_, 0});
    seen.insert(root_.get());
    while (!stack.empty()) {
      auto& [node, idx] = stack.back();
      bool descended = false;
      while (idx < node->inputs.size()) {
        auto& in = node->inputs[idx++];
        if (in->requires_grad && !seen.count(in.get())) {
          seen.insert(in.get());
          stack.push_back({in, 0});
          descended = true;
          break;
        }
      }
      if (!descended && (stack.empty() || stack.back().second >= stack.back().first->inputs.size())) {
        order_.push_back(stack.back().first);
        stack.pop_back();
      }
    }
  }

  size_t size() const { return order_.size(); }
  const std::vector<std::shared_ptr<TensorNode<T>>>& order() const { return order_; }

  void backward() {
    if (order_.empty()) return;
    BackwardCtx<T> ctx;
    ctx.flow[root_.get()] = {T(1)};
    // Reverse topological replay: every consumer deposits into its inputs'
    // flow buffers before those inputs are visited.
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      TensorNode<T>& node = **it;
      auto found = ctx.flow.find(&node);
      if (found == ctx.flow.end()) continue;
      std::vector<T> g = std::move(found->second);
      ctx.flow.erase(found);
      if (g.empty()) continue;
      if (node.backprop) {
        node.backprop(node, g, ctx);
      } else if (node.requires_grad) {
        if (node.grad.empty()) node.grad.assign(node.values.size(), T(0));
        for (size_t i = 0; i < g.size(); ++i) node.grad[i] += g[i];
      }
    }
  }

 private:
  std::shared_ptr<TensorNode<T>> root_;
  std::vector<std::shared_ptr<TensorNode<T>>> order_;
};

template <typename T>
void backward(const Tensor<T>& root) {
  Tape<T>(root).backward();
}

// Scans the computation producing `root` in forward order and reports the
// first op whose output contains a non-finite value while all of its inputs
// are finite. Used for the NaN-abort diagnostic in training.
template <typename T>
std::optional<std::string> find_first_nonfinite(const Tensor<T>& root) {
  std::unordered_set<const TensorNode<T>*> seen;
  std::vector<std::pair<std::shared_ptr<TensorNode<T>>, size_t>> stack;
  std::vector<std::shared_ptr<TensorNode<T>>> order;
  stack.push_back({root.node(), 0});
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    bool descended = false;
    while (idx < node->inputs.size()) {
      auto& in = node->inputs[idx++];
      if (!seen.count(in.get())) {
        seen.insert(in.get());
        stack.push_back({in, 0});
        descended = true;
        break;
      }
    }
    if (!descended && (stack.empty() || stack.back().second >= stack.back().first->inputs.size())) {
      order.push_back(stack.back().first);
      stack.pop_back();
    }
  }
  auto finite = [](const std::vector<T>& v) {
    for (T x : v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  };
  std::unordered_map<const TensorNode<T>*, bool> ok;
  for (auto& n : order) {
    bool self = finite(n->values);
    ok[n.get()] = self;
    if (!self) {
      bool inputs_ok = true;
      for (auto& in : n->inputs) inputs_ok = inputs_ok && ok[in.get()];
      if (inputs_ok) return std::string(n->op) + " " + shape_str(n->shape);
    }
  }
  return std::nullopt;
}

// Named parameter collection. std::map keeps iteration lexicographic, which
// pins checkpoint layout and optimizer order.
template <typename T>
class ParamStore {
 public:
  Tensor<T>& create(const std::string& name, Shape shape) {
    check(!m_.count(name), "duplicate parameter name: " + name);
    Tensor<T> t = Tensor<T>::zeros(std::move(shape));
    t.set_requires_grad(true);
    return m_.emplace(name, std::move(t)).first->second;
  }
  Tensor<T>& put(const std::string& name, Tensor<T> t) {
    check(!m_.count(name), "duplicate parameter name: " + name);
    t.set_requires_grad(true);
    return m_.emplace(name, std::move(t)).first->second;
  }
  Tensor<T>& at(const std::string& name) {
    auto it = m_.find(name);
    check(it != m_.end(), "missing parameter: " + name);
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = m_.find(name);
    check(it != m_.end(), "missing parameter: " + name);
    return it->second;
  }
  Tensor<T>* find(const std::string& name) {
    auto it = m_.find(name);
    return it == m_.end() ? nullptr : &it->second;
  }
  bool contains(const std::string& name) const { return m_.count(name) > 0; }

  int64_t total_params() const {
    int64_t n = 0;
    for (auto& [k, v] : m_) n += v.numel();
    return n;
  }
  void zero_grads() {
    for (auto& [k, v] : m_) v.grad(), v.zero_grad();
  }
  ParamStore clone() const {
    ParamStore out;
    for (auto& [k, v] : m_) out.put(k, v.clone_detached());
    return out;
  }
  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (auto& [k, v] : m_) {
      std::vector<U> data(v.values().begin(), v.values().end());
      out.put(k, Tensor<U>::from(v.shape(), std::move(data)));
    }
    return out;
  }

  size_t size() const { return m_.size(); }
  auto begin() { return m_.begin(); }
  auto end() { return m_.end(); }
  auto begin() const { return m_.begin(); }
  auto end() const { return m_.end(); }

 private:
  std::map<std::string, Tensor<T>> m_;
};

// Prefixed view into a ParamStore for hierarchical parameter names.
template <typename T>
struct Scope {
  ParamStore<T>* store = nullptr;
  std::string prefix;

  Scope sub(const std::string& s) const { return {store, prefix + s + "."}; }
  std::string name(const std::string& leaf) const { return prefix + leaf; }
  Tensor<T>& create(const std::string& leaf, Shape shape) const {
    return store->create(name(leaf), std::move(shape));
  }
  Tensor<T>& at(const std::string& leaf) const { return store->at(name(leaf)); }
};

}  // namespace fcbfuse
