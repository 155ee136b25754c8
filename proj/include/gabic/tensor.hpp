#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "gabic/rng.hpp"

namespace gabic {

template <typename T>
class Tensor;

namespace detail {

template <typename T>
struct Node {
  std::vector<int> shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated lazily, same size as value
  bool requires_grad = false;
  long seq = -1;
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::function<void(Node<T>&)> backprop;
};

inline long next_seq() {
  static std::atomic<long> counter{0};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename T>
void ensure_grad(Node<T>& n) {
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), T(0));
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

// Disables tape recording for its scope (inference / oracle evaluation).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev; }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <typename T>
class Tensor {
 public:
  using NodeP = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(NodeP n) : n_(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape) { return full(std::move(shape), T(0)); }

  static Tensor full(std::vector<int> shape, T v) {
    auto n = std::make_shared<detail::Node<T>>();
    long count = 1;
    for (int d : shape) {
      if (d <= 0) throw std::invalid_argument("tensor: nonpositive extent " + shape_str(shape));
      count *= d;
    }
    n->shape = std::move(shape);
    n->value.assign(count, v);
    n->seq = detail::next_seq();
    return Tensor(n);
  }

  static Tensor from_data(std::vector<int> shape, std::vector<T> data) {
    auto t = zeros(std::move(shape));
    if (static_cast<long>(data.size()) != t.numel())
      throw std::invalid_argument("tensor: data size " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(t.shape()));
    t.node()->value = std::move(data);
    return t;
  }

  static Tensor scalar(T v) { return full({1}, v); }

  static Tensor rand_uniform(std::vector<int> shape, Rng& rng, double lo, double hi) {
    auto t = zeros(std::move(shape));
    for (auto& x : t.node()->value) x = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  static Tensor rand_normal(std::vector<int> shape, Rng& rng, double mean, double stddev) {
    auto t = zeros(std::move(shape));
    for (auto& x : t.node()->value) x = static_cast<T>(mean + stddev * rng.normal());
    return t;
  }

  bool defined() const { return static_cast<bool>(n_); }
  const std::vector<int>& shape() const { return n_->shape; }
  int ndim() const { return static_cast<int>(n_->shape.size()); }
  int dim(int i) const { return n_->shape[i]; }
  long numel() const { return static_cast<long>(n_->value.size()); }

  T* data() { return n_->value.data(); }
  const T* data() const { return n_->value.data(); }
  std::vector<T>& vec() { return n_->value; }
  const std::vector<T>& vec() const { return n_->value; }

  T item() const {
    if (numel() != 1) throw std::invalid_argument("item: tensor is not scalar " + shape_str(shape()));
    return n_->value[0];
  }

  Tensor& set_requires_grad(bool rg = true) {
    n_->requires_grad = rg;
    return *this;
  }
  bool requires_grad() const { return n_->requires_grad; }

  bool has_grad() const { return n_->grad.size() == n_->value.size(); }
  std::vector<T>& grad() {
    detail::ensure_grad(*n_);
    return n_->grad;
  }
  const std::vector<T>& grad() const {
    detail::ensure_grad(*n_);
    return n_->grad;
  }
  void zero_grad() { n_->grad.assign(n_->value.size(), T(0)); }

  // Same storage, no tape participation.
  Tensor detach() const {
    auto n = std::make_shared<detail::Node<T>>();
    n->shape = n_->shape;
    n->value = n_->value;
    n->seq = detail::next_seq();
    return Tensor(n);
  }

  Tensor clone() const { return detach(); }

  NodeP node() const { return n_; }

 private:
  NodeP n_;
};

// Builds a tape node: requires_grad is inherited from the parents, and the
// backprop closure is recorded only while grad mode is on.
template <typename T, typename BackFn>
Tensor<T> make_op(std::vector<int> shape, const std::vector<Tensor<T>>& parents, BackFn&& fn) {
  auto out = Tensor<T>::zeros(std::move(shape));
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  if (rg && grad_enabled()) {
    auto n = out.node();
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.node());
    n->backprop = std::forward<BackFn>(fn);
  }
  return out;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Nodes are created in forward order,
// so descending creation sequence is a valid topological order. Gradients
// accumulate additively across fan-out. Closures are dropped after running so
// the activation graph is released.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be a defined scalar, got " +
                                (loss.defined() ? shape_str(loss.shape()) : std::string("<empty>")));
  using Node = detail::Node<T>;
  auto root = loss.node();
  if (!root->requires_grad) return;  // detached loss: nothing to do

  std::vector<std::shared_ptr<Node>> order;
  std::unordered_set<Node*> seen;
  std::vector<std::shared_ptr<Node>> stack{root};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents)
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p);
  }
  std::sort(order.begin(), order.end(),
            [](const auto& a, const auto& b) { return a->seq > b->seq; });

  detail::ensure_grad(*root);
  root->grad[0] += T(1);
  for (auto& n : order) {
    if (n->backprop && n->grad.size() == n->value.size()) n->backprop(*n);
    n->backprop = nullptr;
    n->parents.clear();
  }
}

// ---------------------------------------------------------------------------
// gemm kernels (row-major, accumulate into C)
// ---------------------------------------------------------------------------

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void gemm_nn(int m, int k, int n, const T* A, const T* B, T* C) {
  for (int i = 0; i < m; ++i) {
    const T* a = A + static_cast<long>(i) * k;
    T* c = C + static_cast<long>(i) * n;
    for (int p = 0; p < k; ++p) {
      T av = a[p];
      if (av == T(0)) continue;
      const T* b = B + static_cast<long>(p) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(int m, int k, int n, const T* A, const T* B, T* C) {
  for (int i = 0; i < m; ++i) {
    const T* a = A + static_cast<long>(i) * k;
    T* c = C + static_cast<long>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* b = B + static_cast<long>(j) * k;
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += a[p] * b[p];
      c[j] += acc;
    }
  }
}

// C[m,n] += A[k,m]^T * B[k,n]
template <typename T>
void gemm_tn(int m, int k, int n, const T* A, const T* B, T* C) {
  for (int p = 0; p < k; ++p) {
    const T* a = A + static_cast<long>(p) * m;
    const T* b = B + static_cast<long>(p) * n;
    for (int i = 0; i < m; ++i) {
      T av = a[i];
      if (av == T(0)) continue;
      T* c = C + static_cast<long>(i) * n;
      for (int j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// ---------------------------------------------------------------------------
// elementwise helpers
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

}  // namespace detail

// y = f(x); df(x, y) is dy/dx used by the backward pass.
template <typename T, typename F, typename DF>
Tensor<T> unary_op(const Tensor<T>& x, F f, DF df) {
  auto xn = x.node();
  auto out = make_op<T>(x.shape(), {x}, [xn, df](detail::Node<T>& o) {
    detail::ensure_grad(*xn);
    for (long i = 0; i < static_cast<long>(o.value.size()); ++i)
      xn->grad[i] += o.grad[i] * static_cast<T>(df(xn->value[i], o.value[i]));
  });
  const T* src = x.data();
  T* dst = out.data();
  for (long i = 0; i < x.numel(); ++i) dst[i] = static_cast<T>(f(src[i]));
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "add");
  auto an = a.node(), bn = b.node();
  auto out = make_op<T>(a.shape(), {a, b}, [an, bn](detail::Node<T>& o) {
    if (an->requires_grad) {
      detail::ensure_grad(*an);
      for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      detail::ensure_grad(*bn);
      for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i];
    }
  });
  const T* pa = a.data();
  const T* pb = b.data();
  T* dst = out.data();
  for (long i = 0; i < a.numel(); ++i) dst[i] = pa[i] + pb[i];
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "sub");
  auto an = a.node(), bn = b.node();
  auto out = make_op<T>(a.shape(), {a, b}, [an, bn](detail::Node<T>& o) {
    if (an->requires_grad) {
      detail::ensure_grad(*an);
      for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      detail::ensure_grad(*bn);
      for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] -= o.grad[i];
    }
  });
  const T* pa = a.data();
  const T* pb = b.data();
  T* dst = out.data();
  for (long i = 0; i < a.numel(); ++i) dst[i] = pa[i] - pb[i];
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_same_shape(a, b, "mul");
  auto an = a.node(), bn = b.node();
  auto out = make_op<T>(a.shape(), {a, b}, [an, bn](detail::Node<T>& o) {
    if (an->requires_grad) {
      detail::ensure_grad(*an);
      for (size_t i = 0; i < o.grad.size(); ++i) an->grad[i] += o.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      detail::ensure_grad(*bn);
      for (size_t i = 0; i < o.grad.size(); ++i) bn->grad[i] += o.grad[i] * an->value[i];
    }
  });
  const T* pa = a.data();
  const T* pb = b.data();
  T* dst = out.data();
  for (long i = 0; i < a.numel(); ++i) dst[i] = pa[i] * pb[i];
  return out;
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& x, double s) {
  return unary_op(x, [s](T v) { return v * static_cast<T>(s); }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, double s) {
  return unary_op(x, [s](T v) { return v + static_cast<T>(s); }, [](T, T) { return 1.0; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return mul_scalar(x, -1.0);
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, double slope = 0.01) {
  return unary_op(
      x, [slope](T v) { return v >= T(0) ? v : static_cast<T>(slope * v); },
      [slope](T v, T) { return v >= T(0) ? 1.0 : slope; });
}

template <typename T>
Tensor<T> exp_op(const Tensor<T>& x) {
  return unary_op(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log_op(const Tensor<T>& x) {
  return unary_op(x, [](T v) { return std::log(v); }, [](T v, T) { return 1.0 / v; });
}

template <typename T>
Tensor<T> tanh_op(const Tensor<T>& x) {
  return unary_op(x, [](T v) { return std::tanh(v); }, [](T, T y) { return 1.0 - double(y) * double(y); });
}

// max(x, m) with subgradient 0 on the clamped side.
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& x, double m) {
  return unary_op(
      x, [m](T v) { return v < static_cast<T>(m) ? static_cast<T>(m) : v; },
      [m](T v, T) { return v < static_cast<T>(m) ? 0.0 : 1.0; });
}

// Rounding with a pass-through gradient (half away from zero).
template <typename T>
Tensor<T> ste_round(const Tensor<T>& x) {
  return unary_op(x, [](T v) { return std::round(v); }, [](T, T) { return 1.0; });
}

// Exact rounding, detached from the tape (coding path).
template <typename T>
Tensor<T> round_detach(const Tensor<T>& x) {
  auto out = Tensor<T>::zeros(x.shape());
  const T* src = x.data();
  T* dst = out.data();
  for (long i = 0; i < x.numel(); ++i) dst[i] = std::round(src[i]);
  return out;
}

// y = x + u, u ~ U(-0.5, 0.5) drawn per element; gradient is identity.
template <typename T>
Tensor<T> add_uniform_noise(const Tensor<T>& x, Rng& rng) {
  auto out = unary_op(x, [](T v) { return v; }, [](T, T) { return 1.0; });
  T* dst = out.data();
  for (long i = 0; i < x.numel(); ++i) dst[i] += static_cast<T>(rng.uniform() - 0.5);
  return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  auto xn = x.node();
  auto out = make_op<T>({1}, {x}, [xn](detail::Node<T>& o) {
    detail::ensure_grad(*xn);
    T g = o.grad[0];
    for (auto& v : xn->grad) v += g;
  });
  double acc = 0.0;
  const T* src = x.data();
  for (long i = 0; i < x.numel(); ++i) acc += src[i];
  out.data()[0] = static_cast<T>(acc);
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  long n = x.numel();
  auto xn = x.node();
  auto out = make_op<T>({1}, {x}, [xn, n](detail::Node<T>& o) {
    detail::ensure_grad(*xn);
    T g = o.grad[0] / static_cast<T>(n);
    for (auto& v : xn->grad) v += g;
  });
  double acc = 0.0;
  const T* src = x.data();
  for (long i = 0; i < n; ++i) acc += src[i];
  out.data()[0] = static_cast<T>(acc / n);
  return out;
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  auto d = sub(a, b);
  return mean(mul(d, d));
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

// A [m,k] x B [k,n], or batched A [b,m,k] x shared B [k,n] (leading dims fold).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (b.ndim() != 2 || (a.ndim() != 2 && a.ndim() != 3))
    throw std::invalid_argument("matmul: unsupported ranks " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  int k = a.dim(a.ndim() - 1);
  if (k != b.dim(0))
    throw std::invalid_argument("matmul: inner extent mismatch " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  int n = b.dim(1);
  long rows = a.numel() / k;
  std::vector<int> out_shape(a.shape());
  out_shape.back() = n;

  auto an = a.node(), bn = b.node();
  auto out = make_op<T>(out_shape, {a, b}, [an, bn, rows, k, n](detail::Node<T>& o) {
    if (an->requires_grad) {
      detail::ensure_grad(*an);
      gemm_nt<T>(static_cast<int>(rows), n, k, o.grad.data(), bn->value.data(), an->grad.data());
    }
    if (bn->requires_grad) {
      detail::ensure_grad(*bn);
      gemm_tn<T>(k, static_cast<int>(rows), n, an->value.data(), o.grad.data(), bn->grad.data());
    }
  });
  gemm_nn<T>(static_cast<int>(rows), k, n, a.data(), b.data(), out.data());
  return out;
}

// Batched A [b,m,k] x B [b,k,n] -> [b,m,n]
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
    throw std::invalid_argument("bmm: incompatible shapes " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  int bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  auto an = a.node(), bn = b.node();
  auto out = make_op<T>({bs, m, n}, {a, b}, [an, bn, bs, m, k, n](detail::Node<T>& o) {
    for (int i = 0; i < bs; ++i) {
      const T* go = o.grad.data() + static_cast<long>(i) * m * n;
      if (an->requires_grad) {
        detail::ensure_grad(*an);
        gemm_nt<T>(m, n, k, go, bn->value.data() + static_cast<long>(i) * k * n,
                   an->grad.data() + static_cast<long>(i) * m * k);
      }
      if (bn->requires_grad) {
        detail::ensure_grad(*bn);
        gemm_tn<T>(k, m, n, an->value.data() + static_cast<long>(i) * m * k, go,
                   bn->grad.data() + static_cast<long>(i) * k * n);
      }
    }
  });
  for (int i = 0; i < bs; ++i)
    gemm_nn<T>(m, k, n, a.data() + static_cast<long>(i) * m * k,
               b.data() + static_cast<long>(i) * k * n, out.data() + static_cast<long>(i) * m * n);
  return out;
}

// Batched A [b,m,k] x B [b,n,k]^T -> [b,m,n]
template <typename T>
Tensor<T> bmm_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
    throw std::invalid_argument("bmm_nt: incompatible shapes " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  int bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
  auto an = a.node(), bn = b.node();
  auto out = make_op<T>({bs, m, n}, {a, b}, [an, bn, bs, m, k, n](detail::Node<T>& o) {
    for (int i = 0; i < bs; ++i) {
      const T* go = o.grad.data() + static_cast<long>(i) * m * n;
      if (an->requires_grad) {
        detail::ensure_grad(*an);
        gemm_nn<T>(m, n, k, go, bn->value.data() + static_cast<long>(i) * n * k,
                   an->grad.data() + static_cast<long>(i) * m * k);
      }
      if (bn->requires_grad) {
        detail::ensure_grad(*bn);
        gemm_tn<T>(k, m, n, an->value.data() + static_cast<long>(i) * m * k, go,
                   bn->grad.data() + static_cast<long>(i) * n * k);
      }
    }
  });
  for (int i = 0; i < bs; ++i)
    gemm_nt<T>(m, k, n, a.data() + static_cast<long>(i) * m * k,
               b.data() + static_cast<long>(i) * n * k, out.data() + static_cast<long>(i) * m * n);
  return out;
}

// A [m,k] x B [n,k]^T -> [m,n], 2-d only.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
    throw std::invalid_argument("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  int m = a.dim(0), k = a.dim(1), n = b.dim(0);
  auto an = a.node(), bn = b.node();
  auto out = make_op<T>({m, n}, {a, b}, [an, bn, m, k, n](detail::Node<T>& o) {
    if (an->requires_grad) {
      detail::ensure_grad(*an);
      gemm_nn<T>(m, n, k, o.grad.data(), bn->value.data(), an->grad.data());
    }
    if (bn->requires_grad) {
      detail::ensure_grad(*bn);
      gemm_tn<T>(n, m, k, o.grad.data(), an->value.data(), bn->grad.data());
    }
  });
  gemm_nt<T>(m, k, n, a.data(), b.data(), out.data());
  return out;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& x) {
  if (x.ndim() != 2) throw std::invalid_argument("transpose2d: expected 2-d, got " + shape_str(x.shape()));
  int m = x.dim(0), n = x.dim(1);
  auto xn = x.node();
  auto out = make_op<T>({n, m}, {x}, [xn, m, n](detail::Node<T>& o) {
    detail::ensure_grad(*xn);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) xn->grad[static_cast<long>(j) * n + i] += o.grad[static_cast<long>(i) * m + j];
  });
  const T* src = x.data();
  T* dst = out.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) dst[static_cast<long>(j) * m + i] = src[static_cast<long>(i) * n + j];
  return out;
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  if (axis < 0) axis += x.ndim();
  if (axis < 0 || axis >= x.ndim())
    throw std::invalid_argument("softmax: axis out of range for " + shape_str(x.shape()));
  const T* src = x.data();
  for (long i = 0; i < x.numel(); ++i)
    if (!std::isfinite(static_cast<double>(src[i])))
      throw std::invalid_argument("softmax: non-finite input at index " + std::to_string(i));

  long outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  long n = x.dim(axis);
  for (int i = axis + 1; i < x.ndim(); ++i) inner *= x.dim(i);

  auto xn = x.node();
  auto out = make_op<T>(x.shape(), {x}, [xn, outer, n, inner](detail::Node<T>& o) {
    detail::ensure_grad(*xn);
    for (long ou = 0; ou < outer; ++ou)
      for (long in = 0; in < inner; ++in) {
        long base = ou * n * inner + in;
        double dot = 0.0;
        for (long j = 0; j < n; ++j) {
          long ix = base + j * inner;
          dot += static_cast<double>(o.grad[ix]) * o.value[ix];
        }
        for (long j = 0; j < n; ++j) {
          long ix = base + j * inner;
          xn->grad[ix] += o.value[ix] * (o.grad[ix] - static_cast<T>(dot));
        }
      }
  });
  T* dst = out.data();
  for (long ou = 0; ou < outer; ++ou)
    for (long in = 0; in < inner; ++in) {
      long base = ou * n * inner + in;
      T mx = src[base];
      for (long j = 1; j < n; ++j) mx = std::max(mx, src[base + j * inner]);
      double denom = 0.0;
      for (long j = 0; j < n; ++j) {
        T e = std::exp(src[base + j * inner] - mx);
        dst[base + j * inner] = e;
        denom += e;
      }
      for (long j = 0; j < n; ++j) dst[base + j * inner] = static_cast<T>(dst[base + j * inner] / denom);
    }
  return out;
}

// Softmax over the last axis restricted to entries with mask != 0; masked
// entries are exactly zero in the output. The mask is structure, not data:
// gradients flow only through the selected entries.
template <typename T>
Tensor<T> masked_softmax_lastdim(const Tensor<T>& x, std::shared_ptr<std::vector<std::uint8_t>> mask) {
  if (!mask || static_cast<long>(mask->size()) != x.numel())
    throw std::invalid_argument("masked_softmax: mask size mismatch");
  long n = x.dim(x.ndim() - 1);
  long rows = x.numel() / n;
  auto xn = x.node();
  auto out = make_op<T>(x.shape(), {x}, [xn, mask, rows, n](detail::Node<T>& o) {
    detail::ensure_grad(*xn);
    const std::uint8_t* m = mask->data();
    for (long r = 0; r < rows; ++r) {
      long base = r * n;
      double dot = 0.0;
      for (long j = 0; j < n; ++j)
        if (m[base + j]) dot += static_cast<double>(o.grad[base + j]) * o.value[base + j];
      for (long j = 0; j < n; ++j)
        if (m[base + j])
          xn->grad[base + j] += o.value[base + j] * (o.grad[base + j] - static_cast<T>(dot));
    }
  });
  const T* src = x.data();
  T* dst = out.data();
  const std::uint8_t* m = mask->data();
  for (long r = 0; r < rows; ++r) {
    long base = r * n;
    T mx = std::numeric_limits<T>::lowest();
    bool any = false;
    for (long j = 0; j < n; ++j)
      if (m[base + j]) {
        mx = any ? std::max(mx, src[base + j]) : src[base + j];
        any = true;
      }
    if (!any) throw std::invalid_argument("masked_softmax: empty row " + std::to_string(r));
    double denom = 0.0;
    for (long j = 0; j < n; ++j) {
      if (m[base + j]) {
        T e = std::exp(src[base + j] - mx);
        dst[base + j] = e;
        denom += e;
      } else {
        dst[base + j] = T(0);
      }
    }
    for (long j = 0; j < n; ++j)
      if (m[base + j]) dst[base + j] = static_cast<T>(dst[base + j] / denom);
  }
  return out;
}

// ---------------------------------------------------------------------------
// slicing / concat
// ---------------------------------------------------------------------------

// NCHW channel slice [c0, c1).
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1) {
  if (x.ndim() != 4) throw std::invalid_argument("slice_channels: expected 4-d, got " + shape_str(x.shape()));
  int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (c0 < 0 || c1 > C || c0 >= c1)
    throw std::invalid_argument("slice_channels: bad range [" + std::to_string(c0) + "," +
                                std::to_string(c1) + ") of " + std::to_string(C));
  int Cs = c1 - c0;
  long hw = static_cast<long>(H) * W;
  auto xn = x.node();
  auto out = make_op<T>({N, Cs, H, W}, {x}, [xn, N, C, Cs, hw, c0](detail::Node<T>& o) {
    detail::ensure_grad(*xn);
    for (int b = 0; b < N; ++b)
      for (int c = 0; c < Cs; ++c) {
        const T* g = o.grad.data() + (static_cast<long>(b) * Cs + c) * hw;
        T* dst = xn->grad.data() + (static_cast<long>(b) * C + c0 + c) * hw;
        for (long i = 0; i < hw; ++i) dst[i] += g[i];
      }
  });
  for (int b = 0; b < N; ++b)
    for (int c = 0; c < Cs; ++c)
      std::copy_n(x.data() + (static_cast<long>(b) * C + c0 + c) * hw, hw,
                  out.data() + (static_cast<long>(b) * Cs + c) * hw);
  return out;
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: empty input");
  int N = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3);
  int C = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 4 || p.dim(0) != N || p.dim(2) != H || p.dim(3) != W)
      throw std::invalid_argument("concat_channels: incompatible part " + shape_str(p.shape()));
    C += p.dim(1);
  }
  long hw = static_cast<long>(H) * W;
  std::vector<typename Tensor<T>::NodeP> pnodes;
  std::vector<int> pch;
  for (const auto& p : parts) {
    pnodes.push_back(p.node());
    pch.push_back(p.dim(1));
  }
  auto out = make_op<T>({N, C, H, W}, parts, [pnodes, pch, N, C, hw](detail::Node<T>& o) {
    int off = 0;
    for (size_t k = 0; k < pnodes.size(); ++k) {
      auto& pn = pnodes[k];
      if (pn->requires_grad) {
        detail::ensure_grad(*pn);
        for (int b = 0; b < N; ++b)
          for (int c = 0; c < pch[k]; ++c) {
            const T* g = o.grad.data() + (static_cast<long>(b) * C + off + c) * hw;
            T* dst = pn->grad.data() + (static_cast<long>(b) * pch[k] + c) * hw;
            for (long i = 0; i < hw; ++i) dst[i] += g[i];
          }
      }
      off += pch[k];
    }
  });
  int off = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    for (int b = 0; b < N; ++b)
      for (int c = 0; c < pch[k]; ++c)
        std::copy_n(parts[k].data() + (static_cast<long>(b) * pch[k] + c) * hw, hw,
                    out.data() + (static_cast<long>(b) * C + off + c) * hw);
    off += pch[k];
  }
  return out;
}

// Slice of the innermost axis [c0, c1), any rank.
template <typename T>
Tensor<T> slice_lastdim(const Tensor<T>& x, int c0, int c1) {
  int C = x.dim(x.ndim() - 1);
  if (c0 < 0 || c1 > C || c0 >= c1)
    throw std::invalid_argument("slice_lastdim: bad range [" + std::to_string(c0) + "," +
                                std::to_string(c1) + ") of " + std::to_string(C));
  int Cs = c1 - c0;
  long rows = x.numel() / C;
  std::vector<int> shape(x.shape());
  shape.back() = Cs;
  auto xn = x.node();
  auto out = make_op<T>(shape, {x}, [xn, rows, C, Cs, c0](detail::Node<T>& o) {
    detail::ensure_grad(*xn);
    for (long r = 0; r < rows; ++r) {
      const T* g = o.grad.data() + r * Cs;
      T* dst = xn->grad.data() + r * C + c0;
      for (int i = 0; i < Cs; ++i) dst[i] += g[i];
    }
  });
  for (long r = 0; r < rows; ++r)
    std::copy_n(x.data() + r * C + c0, Cs, out.data() + r * Cs);
  return out;
}

// Concat along the innermost axis, any (equal) leading shape.
template <typename T>
Tensor<T> concat_lastdim(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_lastdim: empty input");
  std::vector<int> lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  int C = 0;
  std::vector<int> pch;
  std::vector<typename Tensor<T>::NodeP> pnodes;
  for (const auto& p : parts) {
    std::vector<int> pl(p.shape().begin(), p.shape().end() - 1);
    if (pl != lead)
      throw std::invalid_argument("concat_lastdim: incompatible part " + shape_str(p.shape()));
    pch.push_back(p.dim(p.ndim() - 1));
    pnodes.push_back(p.node());
    C += pch.back();
  }
  long rows = 1;
  for (int d : lead) rows *= d;
  std::vector<int> shape(lead);
  shape.push_back(C);
  auto out = make_op<T>(shape, parts, [pnodes, pch, rows, C](detail::Node<T>& o) {
    int off = 0;
    for (size_t k = 0; k < pnodes.size(); ++k) {
      auto& pn = pnodes[k];
      if (pn->requires_grad) {
        detail::ensure_grad(*pn);
        for (long r = 0; r < rows; ++r) {
          const T* g = o.grad.data() + r * C + off;
          T* dst = pn->grad.data() + r * pch[k];
          for (int i = 0; i < pch[k]; ++i) dst[i] += g[i];
        }
      }
      off += pch[k];
    }
  });
  int off = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    for (long r = 0; r < rows; ++r)
      std::copy_n(parts[k].data() + r * pch[k], pch[k], out.data() + r * C + off);
    off += pch[k];
  }
  return out;
}

// Select index i along the first axis of a 3-d tensor -> 2-d.
template <typename T>
Tensor<T> slice_dim0(const Tensor<T>& x, int i) {
  if (x.ndim() != 3 || i < 0 || i >= x.dim(0))
    throw std::invalid_argument("slice_dim0: bad index " + std::to_string(i) + " for " +
                                shape_str(x.shape()));
  int m = x.dim(1), n = x.dim(2);
  long sz = static_cast<long>(m) * n;
  auto xn = x.node();
  auto out = make_op<T>({m, n}, {x}, [xn, i, sz](detail::Node<T>& o) {
    detail::ensure_grad(*xn);
    T* dst = xn->grad.data() + i * sz;
    for (long j = 0; j < sz; ++j) dst[j] += o.grad[j];
  });
  std::copy_n(x.data() + i * sz, sz, out.data());
  return out;
}

// Add a per-channel bias to an NCHW tensor.
template <typename T>
Tensor<T> bias_add(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.ndim() != 4 || b.ndim() != 1 || b.dim(0) != x.dim(1))
    throw std::invalid_argument("bias_add: incompatible " + shape_str(x.shape()) + " + " +
                                shape_str(b.shape()));
  int N = x.dim(0), C = x.dim(1);
  long hw = x.numel() / (static_cast<long>(N) * C);
  auto xn = x.node(), bn = b.node();
  auto out = make_op<T>(x.shape(), {x, b}, [xn, bn, N, C, hw](detail::Node<T>& o) {
    if (xn->requires_grad) {
      detail::ensure_grad(*xn);
      for (size_t i = 0; i < o.grad.size(); ++i) xn->grad[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      detail::ensure_grad(*bn);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const T* g = o.grad.data() + (static_cast<long>(n) * C + c) * hw;
          double acc = 0.0;
          for (long i = 0; i < hw; ++i) acc += g[i];
          bn->grad[c] += static_cast<T>(acc);
        }
    }
  });
  const T* src = x.data();
  T* dst = out.data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      T bv = b.data()[c];
      long base = (static_cast<long>(n) * C + c) * hw;
      for (long i = 0; i < hw; ++i) dst[base + i] = src[base + i] + bv;
    }
  return out;
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

// Central-difference check of d f / d x. f must be deterministic (freeze any
// noise source before calling). Returns max over coordinates of
// |analytic - central| / max(1, |central|).
template <typename T, typename F>
double finite_diff_check(F f, Tensor<T> x, double eps) {
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor<T> loss = f(x);
  if (loss.numel() != 1) throw std::invalid_argument("finite_diff_check: f must be scalar-valued");
  backward(loss);
  std::vector<T> analytic = x.grad();

  double worst = 0.0;
  NoGradGuard ng;
  T* p = x.data();
  for (long i = 0; i < x.numel(); ++i) {
    T keep = p[i];
    p[i] = keep + static_cast<T>(eps);
    double fp = static_cast<double>(f(x).item());
    p[i] = keep - static_cast<T>(eps);
    double fm = static_cast<double>(f(x).item());
    p[i] = keep;
    double central = (fp - fm) / (2.0 * eps);
    double err = std::abs(static_cast<double>(analytic[i]) - central) / std::max(1.0, std::abs(central));
    worst = std::max(worst, err);
  }
  return worst;
}

// Same check across a set of parameter tensors against a nullary loss fn.
template <typename T, typename F>
double finite_diff_check_params(F f, const std::vector<Tensor<T>>& params, double eps) {
  for (auto p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  Tensor<T> loss = f();
  if (loss.numel() != 1) throw std::invalid_argument("finite_diff_check_params: f must be scalar-valued");
  backward(loss);
  std::vector<std::vector<T>> analytic;
  for (const auto& p : params) analytic.push_back(p.grad());

  double worst = 0.0;
  NoGradGuard ng;
  for (size_t t = 0; t < params.size(); ++t) {
    Tensor<T> x = params[t];
    T* p = x.data();
    for (long i = 0; i < x.numel(); ++i) {
      T keep = p[i];
      p[i] = keep + static_cast<T>(eps);
      double fp = static_cast<double>(f().item());
      p[i] = keep - static_cast<T>(eps);
      double fm = static_cast<double>(f().item());
      p[i] = keep;
      double central = (fp - fm) / (2.0 * eps);
      double err =
          std::abs(static_cast<double>(analytic[t][i]) - central) / std::max(1.0, std::abs(central));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace gabic
