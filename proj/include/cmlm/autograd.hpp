#pragma once

// Dense row-major tensors with a reverse-mode gradient tape.
//
// A Tensor is a shared handle onto a graph node. Every primitive returns a
// new node that remembers its parents and a backward rule; `backward(loss)`
// records the reachable nodes into a Tape in topological order and runs the
// rules in reverse. Parameters are leaf tensors created with
// `requires_grad = true`; their gradient buffers accumulate until
// `zero_grad()` is called.
//
// Broadcasting is limited to adding/multiplying a rank-1 tensor along the
// trailing axis. Everything else must match exactly.

#include <algorithm>
#include <cmath>
#include <cstddef>
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

#include "cmlm/rng.hpp"

namespace cmlm::ag {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

[[noreturn]] inline void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using Node = detail::Node<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (shape_size(shape) != values.size())
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                       shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> v(shape_size(shape), T(0));
    return from(std::move(shape), std::move(v), requires_grad);
  }
  static Tensor filled(Shape shape, T x, bool requires_grad = false) {
    std::vector<T> v(shape_size(shape), x);
    return from(std::move(shape), std::move(v), requires_grad);
  }
  static Tensor scalar(T x) { return from({}, {x}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const T> values() const { return node_->value; }
  /// Direct write access; only meaningful on leaves (parameters, inputs).
  std::span<T> mutable_values() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }

  T item() const {
    if (size() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return node_->value[0];
  }
  T operator[](std::size_t i) const { return node_->value[i]; }

  /// Deep copy of a leaf: fresh node, same values, no history.
  Tensor clone() const { return from(shape(), node_->value, requires_grad()); }

  template <typename U>
  Tensor<U> cast(bool requires_grad) const {
    std::vector<U> v(node_->value.begin(), node_->value.end());
    return Tensor<U>::from(shape(), std::move(v), requires_grad);
  }

  const std::shared_ptr<Node>& node() const { return node_; }
  const char* op() const { return node_->op; }

 private:
  std::shared_ptr<Node> node_;
};

/// Topologically ordered record of the nodes reachable from a root.
template <typename T>
class Tape {
 public:
  using Node = detail::Node<T>;

  explicit Tape(const Tensor<T>& root) {
    // Iterative post-order DFS; parents are visited in declaration order so
    // the recorded order is a pure function of graph structure.
    std::unordered_set<const Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    if (!root.node()->requires_grad) return;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  const std::vector<Node*>& order() const { return order_; }

  void run() {
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node* n = *it;
      if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
    }
  }

 private:
  std::vector<Node*> order_;
};

/// Seeds d(loss)/d(loss) = 1 and propagates to every tracked leaf.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;
  Tape<T> tape(loss);
  loss.node()->ensure_grad()[0] += T(1);
  tape.run();
}

namespace detail {

template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<std::shared_ptr<Node<T>>> parents,
                      std::function<void(Node<T>&)> bw) {
  auto n = std::make_shared<Node<T>>();
  n->op = op;
  n->shape = std::move(shape);
  n->value = std::move(value);
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward = std::move(bw);
  }
  return Tensor<T>(std::move(n));
}

template <typename T>
void require_rank(const char* op, const Tensor<T>& t, std::size_t r) {
  if (t.rank() != r)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got shape " +
                     shape_str(t.shape()));
}

template <typename T>
std::size_t last_extent(const Tensor<T>& t) {
  return t.rank() == 0 ? 1 : t.shape().back();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

/// [m,k] x [k,n] -> [m,n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank("matmul", a, 2);
  detail::require_rank("matmul", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) shape_fail("matmul", a.shape(), b.shape());
  std::vector<T> c(m * n, T(0));
  const T* A = a.values().data();
  const T* B = b.values().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = A[i * k + p];
      const T* brow = B + p * n;
      T* crow = c.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>("matmul", {m, n}, std::move(c), {an, bn}, [an, bn, m, k, n](auto& self) {
    const T* G = self.grad.data();
    if (an->requires_grad) {
      auto& ga = an->ensure_grad();
      const T* B = bn->value.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          T acc = T(0);
          for (std::size_t j = 0; j < n; ++j) acc += G[i * n + j] * B[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      const T* A = an->value.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const T aip = A[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * G[i * n + j];
        }
    }
  });
}

/// [m,k] x [n,k]^T -> [m,n]
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank("matmul_nt", a, 2);
  detail::require_rank("matmul_nt", b, 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) shape_fail("matmul_nt", a.shape(), b.shape());
  std::vector<T> c(m * n);
  const T* A = a.values().data();
  const T* B = b.values().data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += A[i * k + p] * B[j * k + p];
      c[i * n + j] = acc;
    }
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>("matmul_nt", {m, n}, std::move(c), {an, bn}, [an, bn, m, k, n](auto& self) {
    const T* G = self.grad.data();
    if (an->requires_grad) {
      auto& ga = an->ensure_grad();
      const T* B = bn->value.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const T g = G[i * n + j];
          for (std::size_t p = 0; p < k; ++p) ga[i * k + p] += g * B[j * k + p];
        }
    }
    if (bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      const T* A = an->value.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const T g = G[i * n + j];
          for (std::size_t p = 0; p < k; ++p) gb[j * k + p] += g * A[i * k + p];
        }
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank("transpose", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.values()[i * n + j];
  auto an = a.node();
  return detail::make_result<T>("transpose", {n, m}, std::move(out), {an}, [an, m, n](auto& self) {
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += self.grad[j * m + i];
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_size(shape) != a.size()) shape_fail("reshape", a.shape(), shape);
  auto an = a.node();
  std::vector<T> v(a.values().begin(), a.values().end());
  return detail::make_result<T>("reshape", std::move(shape), std::move(v), {an}, [an](auto& self) {
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

// Returns true when b broadcasts along a's trailing axis.
template <typename T>
bool check_broadcast(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) return false;
  if (b.rank() == 1 && a.rank() >= 1 && b.dim(0) == a.shape().back()) return true;
  shape_fail(op, a.shape(), b.shape());
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const bool bc = detail::check_broadcast("add", a, b);
  const std::size_t n = b.size();
  std::vector<T> out(a.values().begin(), a.values().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.values()[bc ? i % n : i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>("add", a.shape(), std::move(out), {an, bn}, [an, bn, bc, n](auto& self) {
    if (an->requires_grad) {
      auto& ga = an->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[bc ? i % n : i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_fail("sub", a.shape(), b.shape());
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] - b.values()[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>("sub", a.shape(), std::move(out), {an, bn}, [an, bn](auto& self) {
    if (an->requires_grad) {
      auto& ga = an->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const bool bc = detail::check_broadcast("mul", a, b);
  const std::size_t n = b.size();
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[bc ? i % n : i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>("mul", a.shape(), std::move(out), {an, bn}, [an, bn, bc, n](auto& self) {
    if (an->requires_grad) {
      auto& ga = an->ensure_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * bn->value[bc ? i % n : i];
    }
    if (bn->requires_grad) {
      auto& gb = bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        gb[bc ? i % n : i] += self.grad[i] * an->value[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * s;
  auto an = a.node();
  return detail::make_result<T>("scale", a.shape(), std::move(out), {an}, [an, s](auto& self) {
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * s;
  });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.values()[i]);
  auto an = a.node();
  return detail::make_result<T>("exp", a.shape(), std::move(out), {an}, [an](auto& self) {
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * self.value[i];
  });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.values()[i]);
  auto an = a.node();
  return detail::make_result<T>("log", a.shape(), std::move(out), {an}, [an](auto& self) {
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] / an->value[i];
  });
}

// gelu, tanh approximation:
//   0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluK = 0.044715;

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  const T c = T(kGeluC), k = T(kGeluK);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = a.values()[i];
    out[i] = T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x)));
  }
  auto an = a.node();
  return detail::make_result<T>("gelu", a.shape(), std::move(out), {an}, [an, c, k](auto& self) {
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const T x = an->value[i];
      const T t = std::tanh(c * (x + k * x * x * x));
      const T d = T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3) * k * x * x);
      ga[i] += self.grad[i] * d;
    }
  });
}

// ---------------------------------------------------------------------------
// Normalizations along the last axis

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  const std::size_t n = detail::last_extent(a), rows = a.size() / n;
  std::vector<T> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a.values().data() + r * n;
    T* y = out.data() + r * n;
    const T mx = *std::max_element(x, x + n);
    T z = T(0);
    for (std::size_t j = 0; j < n; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  auto an = a.node();
  return detail::make_result<T>("softmax", a.shape(), std::move(out), {an}, [an, n, rows](auto& self) {
    auto& ga = an->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * n;
      const T* g = self.grad.data() + r * n;
      T dot = T(0);
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += y[j] * (g[j] - dot);
    }
  });
}

/// Normalizes each row to zero mean and unit variance; no affine part.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& a, T eps) {
  const std::size_t n = detail::last_extent(a), rows = a.size() / n;
  std::vector<T> out(a.size());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a.values().data() + r * n;
    T mu = T(0);
    for (std::size_t j = 0; j < n; ++j) mu += x[j];
    mu /= T(n);
    T var = T(0);
    for (std::size_t j = 0; j < n; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= T(n);
    inv_std[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (x[j] - mu) * inv_std[r];
  }
  auto an = a.node();
  return detail::make_result<T>("layer_norm", a.shape(), std::move(out), {an},
                                [an, n, rows, inv_std = std::move(inv_std)](auto& self) {
    auto& ga = an->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * n;
      const T* g = self.grad.data() + r * n;
      T gmean = T(0), gy = T(0);
      for (std::size_t j = 0; j < n; ++j) {
        gmean += g[j];
        gy += g[j] * y[j];
      }
      gmean /= T(n);
      gy /= T(n);
      for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += inv_std[r] * (g[j] - gmean - y[j] * gy);
    }
  });
}

/// Scales each row to unit Euclidean norm. Zero rows are an error.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& a) {
  const std::size_t n = detail::last_extent(a), rows = a.size() / n;
  std::vector<T> out(a.size());
  std::vector<T> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = a.values().data() + r * n;
    T ss = T(0);
    for (std::size_t j = 0; j < n; ++j) ss += x[j] * x[j];
    norms[r] = std::sqrt(ss);
    if (!(norms[r] > T(0)) || !std::isfinite(norms[r]))
      throw std::domain_error("l2_normalize: row " + std::to_string(r) + " has norm " +
                              std::to_string(static_cast<double>(norms[r])));
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[j] / norms[r];
  }
  auto an = a.node();
  return detail::make_result<T>("l2_normalize", a.shape(), std::move(out), {an},
                                [an, n, rows, norms = std::move(norms)](auto& self) {
    auto& ga = an->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = self.value.data() + r * n;
      const T* g = self.grad.data() + r * n;
      T dot = T(0);
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += (g[j] - y[j] * dot) / norms[r];
    }
  });
}

// ---------------------------------------------------------------------------
// Stochastic / structural

/// Inverted dropout: kept entries are divided by (1 - rate) at train time.
template <typename T>
Tensor<T> dropout(const Tensor<T>& a, double rate, Rng& rng) {
  if (rate < 0.0 || rate > 1.0) throw std::invalid_argument("dropout: rate must lie in [0, 1]");
  if (rate == 0.0) return a;
  const T keep_scale = rate < 1.0 ? T(1.0 / (1.0 - rate)) : T(0);
  std::vector<T> mask(a.size());
  for (auto& m : mask) m = uniform01(rng) >= rate ? keep_scale : T(0);
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * mask[i];
  auto an = a.node();
  return detail::make_result<T>("dropout", a.shape(), std::move(out), {an}, [an, mask = std::move(mask)](auto& self) {
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * mask[i];
  });
}

/// Rows of a [V,d] table gathered by id -> [N,d].
template <typename T>
Tensor<T> embedding_lookup(const Tensor<T>& table, std::span<const int> ids) {
  detail::require_rank("embedding_lookup", table, 2);
  const std::size_t V = table.dim(0), d = table.dim(1);
  std::vector<T> out(ids.size() * d);
  std::vector<int> idv(ids.begin(), ids.end());
  for (std::size_t i = 0; i < idv.size(); ++i) {
    if (idv[i] < 0 || static_cast<std::size_t>(idv[i]) >= V)
      throw std::out_of_range("embedding_lookup: id " + std::to_string(idv[i]) + " outside [0," +
                              std::to_string(V) + ")");
    std::copy_n(table.values().data() + idv[i] * d, d, out.data() + i * d);
  }
  auto tn = table.node();
  Shape shape{idv.size(), d};
  return detail::make_result<T>("embedding_lookup", std::move(shape), std::move(out), {tn},
                                [tn, d, idv = std::move(idv)](auto& self) {
    auto& gt = tn->ensure_grad();
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) gt[idv[i] * d + j] += self.grad[i * d + j];
  });
}

/// Selected rows of a rank-2 tensor, in the given order -> [|rows|, d].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, std::span<const std::size_t> rows) {
  detail::require_rank("gather_rows", a, 2);
  const std::size_t n = a.dim(0), d = a.dim(1);
  std::vector<std::size_t> rv(rows.begin(), rows.end());
  std::vector<T> out(rv.size() * d);
  for (std::size_t i = 0; i < rv.size(); ++i) {
    if (rv[i] >= n) throw std::out_of_range("gather_rows: row " + std::to_string(rv[i]) + " of " + std::to_string(n));
    std::copy_n(a.values().data() + rv[i] * d, d, out.data() + i * d);
  }
  auto an = a.node();
  Shape shape{rv.size(), d};
  return detail::make_result<T>("gather_rows", std::move(shape), std::move(out), {an},
                                [an, d, rv = std::move(rv)](auto& self) {
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < rv.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) ga[rv[i] * d + j] += self.grad[i * d + j];
  });
}

/// Row i of a rank-2 tensor as a rank-1 tensor.
template <typename T>
Tensor<T> row(const Tensor<T>& a, std::size_t i) {
  const std::size_t idx[] = {i};
  return reshape(gather_rows(a, std::span<const std::size_t>(idx)), {a.dim(1)});
}

/// Columns [begin, end) of a rank-2 tensor.
template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  detail::require_rank("slice_cols", a, 2);
  const std::size_t m = a.dim(0), n = a.dim(1);
  if (begin > end || end > n) throw ShapeError("slice_cols: bad range for shape " + shape_str(a.shape()));
  const std::size_t w = end - begin;
  std::vector<T> out(m * w);
  for (std::size_t i = 0; i < m; ++i) std::copy_n(a.values().data() + i * n + begin, w, out.data() + i * w);
  auto an = a.node();
  return detail::make_result<T>("slice_cols", {m, w}, std::move(out), {an}, [an, m, n, w, begin](auto& self) {
    auto& ga = an->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j) ga[i * n + begin + j] += self.grad[i * w + j];
  });
}

/// Concatenation along axis 0 (any rank, trailing extents equal) or along
/// axis 1 of rank-2 tensors (row counts equal).
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Tensor<T>& first = parts.front();
  std::vector<std::shared_ptr<detail::Node<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  if (axis == 0) {
    if (first.rank() == 0) throw ShapeError("concat: scalars cannot be concatenated");
    Shape tail(first.shape().begin() + 1, first.shape().end());
    std::size_t rows = 0;
    std::vector<T> out;
    for (const auto& p : parts) {
      if (p.rank() != first.rank() || !std::equal(tail.begin(), tail.end(), p.shape().begin() + 1))
        shape_fail("concat", first.shape(), p.shape());
      rows += p.dim(0);
      out.insert(out.end(), p.values().begin(), p.values().end());
    }
    Shape shape = first.shape();
    shape[0] = rows;
    return detail::make_result<T>("concat", std::move(shape), std::move(out), nodes, [nodes](auto& self) {
      std::size_t off = 0;
      for (const auto& n : nodes) {
        if (n->requires_grad) {
          auto& g = n->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
        }
        off += n->value.size();
      }
    });
  }
  if (axis != 1) throw ShapeError("concat: axis must be 0 or 1");
  const std::size_t m = first.dim(0);
  std::size_t width = 0;
  for (const auto& p : parts) {
    detail::require_rank("concat", p, 2);
    if (p.dim(0) != m) shape_fail("concat", first.shape(), p.shape());
    width += p.dim(1);
  }
  std::vector<T> out(m * width);
  std::size_t col = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t i = 0; i < m; ++i) std::copy_n(p.values().data() + i * w, w, out.data() + i * width + col);
    col += w;
  }
  return detail::make_result<T>("concat", {m, width}, std::move(out), nodes, [nodes, m, width](auto& self) {
    std::size_t col = 0;
    for (const auto& n : nodes) {
      const std::size_t w = n->shape[1];
      if (n->requires_grad) {
        auto& g = n->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < w; ++j) g[i * w + j] += self.grad[i * width + col + j];
      }
      col += w;
    }
  });
}

/// Identity forward; contributes nothing to upstream gradients.
template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& a) {
  return Tensor<T>::from(a.shape(), std::vector<T>(a.values().begin(), a.values().end()), false);
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (T x : a.values()) s += x;
  auto an = a.node();
  return detail::make_result<T>("sum", {}, {s}, {an}, [an](auto& self) {
    auto& ga = an->ensure_grad();
    for (auto& g : ga) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(a), T(1) / T(a.size()));
}

/// Per-row -log softmax(logits)[target] for [M,V] logits -> [M].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> targets) {
  detail::require_rank("cross_entropy", logits, 2);
  const std::size_t M = logits.dim(0), V = logits.dim(1);
  if (targets.size() != M)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  std::vector<int> tv(targets.begin(), targets.end());
  std::vector<T> probs(M * V), out(M);
  for (std::size_t r = 0; r < M; ++r) {
    if (tv[r] < 0 || static_cast<std::size_t>(tv[r]) >= V)
      throw std::out_of_range("cross_entropy: target " + std::to_string(tv[r]) + " outside [0," +
                              std::to_string(V) + ")");
    const T* x = logits.values().data() + r * V;
    const T mx = *std::max_element(x, x + V);
    T z = T(0);
    for (std::size_t j = 0; j < V; ++j) z += (probs[r * V + j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < V; ++j) probs[r * V + j] /= z;
    out[r] = mx + std::log(z) - x[tv[r]];
  }
  auto ln = logits.node();
  return detail::make_result<T>("cross_entropy", {M}, std::move(out), {ln},
                                [ln, V, probs = std::move(probs), tv = std::move(tv)](auto& self) {
    auto& gl = ln->ensure_grad();
    for (std::size_t r = 0; r < tv.size(); ++r) {
      const T g = self.grad[r];
      for (std::size_t j = 0; j < V; ++j) gl[r * V + j] += g * probs[r * V + j];
      gl[r * V + tv[r]] -= g;
    }
  });
}

// ---------------------------------------------------------------------------
// Finite-difference audit

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t entries = 0;
};

/// Relative error |a-b| / max(|a|, |b|, 1e-8).
inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

/// Compares tape gradients of `f` against central differences with the
/// given step, over every entry of every tensor in `params`. `f` must be
/// deterministic and must rebuild its graph from the current parameter
/// values on each call. Parameter values are restored on return.
template <typename T, typename F>
GradCheckResult finite_diff_check(F&& f, std::vector<Tensor<T>> params, double step) {
  if (!(step > 0.0) || !std::isfinite(step)) throw std::invalid_argument("finite_diff_check: step must be positive");
  for (auto& p : params) p.zero_grad();
  Tensor<T> loss = f();
  if (loss.size() != 1) throw ShapeError("finite_diff_check: f must return a scalar");
  if (!std::isfinite(static_cast<double>(loss.item())))
    throw std::domain_error("finite_diff_check: non-finite loss");
  backward(loss);
  GradCheckResult res;
  for (std::size_t t = 0; t < params.size(); ++t) {
    std::vector<T> analytic(params[t].grad().begin(), params[t].grad().end());
    auto vals = params[t].mutable_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const T saved = vals[i];
      vals[i] = saved + T(step);
      const double up = static_cast<double>(f().item());
      vals[i] = saved - T(step);
      const double down = static_cast<double>(f().item());
      vals[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw std::domain_error("finite_diff_check: non-finite value while perturbing tensor " +
                                std::to_string(t));
      const double numeric = (up - down) / (2.0 * step);
      const double err = relative_error(static_cast<double>(analytic[i]), numeric);
      ++res.entries;
      if (res.entries == 1 || err > res.max_relative_error) {
        res.max_relative_error = err;
        res.worst_tensor = t;
        res.worst_index = i;
        res.analytic = static_cast<double>(analytic[i]);
        res.numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace cmlm::ag
