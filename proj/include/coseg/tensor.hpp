#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "coseg/common.hpp"

namespace coseg {

// Dense row-major tensor with reverse-mode automatic differentiation.
//
// A TensorT is a shared handle onto a graph node. Operations build a DAG;
// backward(loss) replays the recorded adjoints in reverse topological
// order, which is exactly the chain rule applied node by node. Interior
// gradients are reset at the start of every backward pass; leaf gradients
// accumulate until the caller zeroes them (zero_grad per optimizer step).
//
// Graph mutation (op building, backward) is single-threaded per graph.
// Handles are safe to share read-only across threads.

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool f = true;
  return f;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording for the current thread while alive.
struct NoGradGuard {
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
class TensorT {
 public:
  struct Node {
    std::vector<int> shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until needed
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const Node&)> backprop;

    size_t numel() const { return data.size(); }
    bool leaf() const { return parents.empty(); }
  };

  TensorT() = default;

  explicit TensorT(std::vector<int> shape, T fill = T(0), bool requires_grad = false) {
    size_t n = checked_numel(shape);
    node_ = std::make_shared<Node>();
    node_->shape = std::move(shape);
    node_->data.assign(n, fill);
    node_->requires_grad = requires_grad;
  }

  static TensorT from_data(std::vector<int> shape, std::vector<T> data, bool requires_grad = false) {
    size_t n = checked_numel(shape);
    if (n != data.size())
      throw ShapeError("Tensor: shape holds " + std::to_string(n) + " elements but data has " +
                       std::to_string(data.size()));
    TensorT t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static TensorT scalar_tensor(T value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return check().shape; }
  int rank() const { return static_cast<int>(check().shape.size()); }
  int dim(int i) const { return check().shape[static_cast<size_t>(i)]; }
  size_t numel() const { return check().data.size(); }

  std::vector<T>& values() { return check().data; }
  const std::vector<T>& values() const { return check().data; }

  T scalar() const {
    if (numel() != 1) throw ShapeError("Tensor::scalar: tensor has " + std::to_string(numel()) + " elements");
    return check().data[0];
  }

  bool requires_grad() const { return check().requires_grad; }

  void set_requires_grad(bool rg) {
    Node& n = check();
    if (!n.leaf()) throw Error("set_requires_grad: only leaf tensors can change grad tracking");
    n.requires_grad = rg;
  }

  bool has_grad() const { return defined() && !node_->grad.empty(); }

  // Lazily allocated; an untouched tracked leaf therefore reads as all-zero.
  std::vector<T>& grad() {
    Node& n = check();
    if (n.grad.size() != n.data.size()) n.grad.assign(n.data.size(), T(0));
    return n.grad;
  }

  void zero_grad() {
    Node& n = check();
    if (!n.grad.empty()) std::fill(n.grad.begin(), n.grad.end(), T(0));
  }

  // Copy of the values with no graph history.
  TensorT detach() const {
    const Node& n = check();
    return from_data(n.shape, n.data, false);
  }

  TensorT clone() const {
    const Node& n = check();
    return from_data(n.shape, n.data, n.requires_grad);
  }

  std::shared_ptr<Node> node() const { return node_; }

  static TensorT wrap(std::shared_ptr<Node> n) {
    TensorT t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  static size_t checked_numel(const std::vector<int>& shape) {
    if (shape.empty()) throw ShapeError("Tensor: rank-0 shapes are not supported");
    size_t n = 1;
    for (size_t i = 0; i < shape.size(); ++i) {
      if (shape[i] <= 0)
        throw ShapeError("Tensor: dimension " + std::to_string(i) + " is " + std::to_string(shape[i]) +
                         ", must be positive");
      n *= static_cast<size_t>(shape[i]);
    }
    return n;
  }

  Node& check() const {
    if (!node_) throw Error("Tensor: undefined");
    return *node_;
  }

  std::shared_ptr<Node> node_;
};

using Tensor = TensorT<double>;
using TensorF = TensorT<float>;

namespace detail {

template <class T>
inline std::vector<T>& ensure_grad(typename TensorT<T>::Node& n) {
  if (n.grad.size() != n.data.size()) n.grad.assign(n.data.size(), T(0));
  return n.grad;
}

// Builds an op output node. Recording is skipped when grad mode is off or
// no parent tracks gradients; the output is then a plain leaf.
template <class T>
inline TensorT<T> make_op(std::vector<int> shape, std::vector<T> data,
                          std::vector<std::shared_ptr<typename TensorT<T>::Node>> parents,
                          std::function<void(const typename TensorT<T>::Node&)> backprop) {
  bool track = grad_enabled();
  if (track) {
    bool any = false;
    for (const auto& p : parents) any = any || (p && p->requires_grad);
    track = any;
  }
  TensorT<T> out = TensorT<T>::from_data(std::move(shape), std::move(data), track);
  if (track) {
    out.node()->parents = std::move(parents);
    out.node()->backprop = std::move(backprop);
  }
  return out;
}

}  // namespace detail

// ---- backward -------------------------------------------------------------

template <class T>
inline void backward(const TensorT<T>& loss) {
  using Node = typename TensorT<T>::Node;
  if (!loss.defined()) throw Error("backward: undefined loss tensor");
  if (loss.numel() != 1)
    throw ShapeError("backward: loss must be a scalar, got " + std::to_string(loss.numel()) + " elements");

  // iterative post-order DFS; the reversed order is the replay tape
  std::vector<Node*> topo;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i].get();
      ++i;
      if (p && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      topo.push_back(n);
      stack.pop_back();
    }
  }

  for (Node* n : topo) {
    if (!n->leaf()) n->grad.assign(n->data.size(), T(0));
  }
  loss.node()->grad.assign(1, T(1));

  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

// ---- elementwise and reduction ops ----------------------------------------

namespace detail {
template <class T>
inline void check_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    auto str = [](const std::vector<int>& s) {
      std::string r = "[";
      for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
      return r + "]";
    };
    throw ShapeError(std::string(op) + ": shape mismatch " + str(a.shape()) + " vs " + str(b.shape()));
  }
}
}  // namespace detail

template <class T>
inline TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op<T>(
      a.shape(), std::move(out), {pa, pb}, [pa, pb](const typename TensorT<T>::Node& self) {
        if (pa->requires_grad) {
          auto& g = detail::ensure_grad<T>(*pa);
          for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb->requires_grad) {
          auto& g = detail::ensure_grad<T>(*pb);
          for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
      });
}

template <class T>
inline TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op<T>(
      a.shape(), std::move(out), {pa, pb}, [pa, pb](const typename TensorT<T>::Node& self) {
        if (pa->requires_grad) {
          auto& g = detail::ensure_grad<T>(*pa);
          for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb->requires_grad) {
          auto& g = detail::ensure_grad<T>(*pb);
          for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
      });
}

template <class T>
inline TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  const auto& av = a.values();
  const auto& bv = b.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_op<T>(
      a.shape(), std::move(out), {pa, pb}, [pa, pb](const typename TensorT<T>::Node& self) {
        if (pa->requires_grad) {
          auto& g = detail::ensure_grad<T>(*pa);
          for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->data[i];
        }
        if (pb->requires_grad) {
          auto& g = detail::ensure_grad<T>(*pb);
          for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->data[i];
        }
      });
}

template <class T>
inline TensorT<T> mul_scalar(const TensorT<T>& a, T s) {
  std::vector<T> out(a.numel());
  const auto& av = a.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  auto pa = a.node();
  return detail::make_op<T>(a.shape(), std::move(out), {pa},
                            [pa, s](const typename TensorT<T>::Node& self) {
                              if (!pa->requires_grad) return;
                              auto& g = detail::ensure_grad<T>(*pa);
                              for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
                            });
}

template <class T>
inline TensorT<T> add_scalar(const TensorT<T>& a, T s) {
  std::vector<T> out(a.numel());
  const auto& av = a.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + s;
  auto pa = a.node();
  return detail::make_op<T>(a.shape(), std::move(out), {pa},
                            [pa](const typename TensorT<T>::Node& self) {
                              if (!pa->requires_grad) return;
                              auto& g = detail::ensure_grad<T>(*pa);
                              for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                            });
}

template <class T>
inline TensorT<T> relu(const TensorT<T>& a) {
  std::vector<T> out(a.numel());
  const auto& av = a.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
  auto pa = a.node();
  return detail::make_op<T>(a.shape(), std::move(out), {pa},
                            [pa](const typename TensorT<T>::Node& self) {
                              if (!pa->requires_grad) return;
                              auto& g = detail::ensure_grad<T>(*pa);
                              for (size_t i = 0; i < g.size(); ++i)
                                if (pa->data[i] > T(0)) g[i] += self.grad[i];
                            });
}

template <class T>
inline TensorT<T> sum(const TensorT<T>& a) {
  T acc = T(0);
  for (T v : a.values()) acc += v;
  auto pa = a.node();
  return detail::make_op<T>({1}, {acc}, {pa}, [pa](const typename TensorT<T>::Node& self) {
    if (!pa->requires_grad) return;
    auto& g = detail::ensure_grad<T>(*pa);
    T go = self.grad[0];
    for (size_t i = 0; i < g.size(); ++i) g[i] += go;
  });
}

template <class T>
inline TensorT<T> mean(const TensorT<T>& a) {
  T acc = T(0);
  for (T v : a.values()) acc += v;
  T inv = T(1) / static_cast<T>(a.numel());
  auto pa = a.node();
  return detail::make_op<T>({1}, {acc * inv}, {pa}, [pa, inv](const typename TensorT<T>::Node& self) {
    if (!pa->requires_grad) return;
    auto& g = detail::ensure_grad<T>(*pa);
    T go = self.grad[0] * inv;
    for (size_t i = 0; i < g.size(); ++i) g[i] += go;
  });
}

// Same elements, new shape; gradient passes through unchanged.
template <class T>
inline TensorT<T> reshape(const TensorT<T>& a, std::vector<int> new_shape) {
  size_t n = 1;
  for (int d : new_shape) n *= d > 0 ? static_cast<size_t>(d) : 0;
  if (new_shape.empty() || n != a.numel())
    throw ShapeError("reshape: new shape holds " + std::to_string(n) + " elements, tensor has " +
                     std::to_string(a.numel()));
  auto pa = a.node();
  return detail::make_op<T>(std::move(new_shape), a.values(), {pa},
                            [pa](const typename TensorT<T>::Node& self) {
                              if (!pa->requires_grad) return;
                              auto& g = detail::ensure_grad<T>(*pa);
                              for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                            });
}

// ---- small helpers ---------------------------------------------------------

template <class To, class From>
inline TensorT<To> to_precision(const TensorT<From>& a) {
  std::vector<To> out(a.numel());
  const auto& av = a.values();
  for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<To>(av[i]);
  return TensorT<To>::from_data(a.shape(), std::move(out), false);
}

template <class T>
inline bool all_finite(const TensorT<T>& a) {
  for (T v : a.values())
    if (!std::isfinite(static_cast<double>(v))) return false;
  return true;
}

template <class T>
inline double l2_norm(const TensorT<T>& a) {
  double acc = 0;
  for (T v : a.values()) acc += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(acc);
}

}  // namespace coseg
