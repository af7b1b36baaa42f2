#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "mmsyn/errors.hpp"
#include "mmsyn/image.hpp"

namespace mmsyn {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    if (d <= 0) throw ShapeError("tensor dimensions must be positive");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Reverse-mode differentiation is recorded per thread; sampling workers run
// forward-only under NoGradGuard without touching each other's state.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Dense row-major tensor participating in reverse-mode differentiation.
// Copies share storage (handle semantics); the recorded op graph is a DAG of
// parent links walked once, in topological order, by backward().
template <class T>
class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void accumulate(std::span<const T> g) {
      if (grad.empty()) grad.assign(data.size(), T(0));
      for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
    }
    std::vector<T>& grad_buffer() {
      if (grad.empty()) grad.assign(data.size(), T(0));
      return grad;
    }
  };

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.n_ = std::make_shared<Node>();
    auto n = shape_numel(shape);
    t.n_->shape = std::move(shape);
    t.n_->data.assign(static_cast<std::size_t>(n), T(0));
    return t;
  }

  static Tensor full(Shape shape, T value) {
    Tensor t = zeros(std::move(shape));
    for (auto& x : t.n_->data) x = value;
    return t;
  }

  static Tensor from_data(Shape shape, std::vector<T> data) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
      throw ShapeError("from_data: shape " + shape_str(shape) + " does not match buffer of " +
                       std::to_string(data.size()) + " elements");
    Tensor t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = std::move(shape);
    t.n_->data = std::move(data);
    return t;
  }

  static Tensor scalar(T value) { return from_data({1}, {value}); }

  static Tensor from_image(const Image<T>& img) {
    return from_data({img.h, img.w}, img.v);
  }

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  std::int64_t numel() const { return static_cast<std::int64_t>(n_->data.size()); }
  std::int64_t dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(n_->shape.size()); }

  std::span<T> data() { return n_->data; }
  std::span<const T> data() const { return n_->data; }
  T& operator[](std::int64_t i) { return n_->data[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return n_->data[static_cast<std::size_t>(i)]; }

  T item() const {
    if (numel() != 1) throw ContractError("item(): tensor is not scalar");
    return n_->data[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    n_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !n_->grad.empty(); }
  std::span<const T> grad() const { return n_->grad; }
  std::span<T> grad_buffer() { return n_->grad_buffer(); }
  void zero_grad() { n_->grad.assign(n_->data.size(), T(0)); }

  // Reverse pass from a scalar. Topological order guarantees each node's
  // backward_fn runs exactly once, after all of its consumers.
  void backward() {
    if (numel() != 1) throw ContractError("backward(): root must be scalar");
    n_->grad_buffer()[0] = T(1);

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node* p = node->parents[next++].get();
        if (seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    // order is post-order (parents first); walk it back to front so every
    // node fires after all nodes that consume it.
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* node = *it;
      if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
  }

  // Op helper: mark `out` as produced from `inputs` with the given pullback.
  // Recording is skipped when grads are globally off or no input needs them.
  template <class Fn>
  static void record(Tensor& out, std::initializer_list<Tensor> inputs, Fn&& backward_fn) {
    if (!grad_mode()) return;
    bool needed = false;
    for (const auto& in : inputs) needed = needed || in.n_->requires_grad;
    if (!needed) return;
    out.n_->requires_grad = true;
    for (const auto& in : inputs) out.n_->parents.push_back(in.n_);
    out.n_->backward_fn = std::forward<Fn>(backward_fn);
  }

  std::shared_ptr<Node> node() const { return n_; }

  Tensor clone() const {
    Tensor t = from_data(n_->shape, n_->data);
    t.n_->requires_grad = n_->requires_grad;
    return t;
  }

  Image<T> to_image() const {
    if (ndim() != 2) throw ShapeError("to_image: tensor is not 2-D");
    Image<T> img(static_cast<int>(dim(0)), static_cast<int>(dim(1)));
    img.v = n_->data;
    return img;
  }

 private:
  std::shared_ptr<Node> n_;
};

}  // namespace mmsyn
