#pragma once

// Dense double-precision tensors with reverse-mode automatic differentiation.
// Row-major storage, trailing-dimension broadcasting, no views: every op
// produces a fresh buffer. Graphs are held together by shared_ptr edges from
// result to operands, so independent graphs can live on different threads
// without any shared mutable state.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace gma {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};

using Shape = std::vector<size_t>;
using Mask = std::vector<bool>;  // true = live token, empty = all live

inline size_t numel(const Shape& s) {
  size_t n = 1;
  for (size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

inline bool grad_enabled_flag(int delta = 0) {
  thread_local int depth = 0;
  depth += delta;
  return depth == 0;
}

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until backward touches it
  bool requires_grad = false;
  bool backward_ran = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void accumulate(size_t i, double g) {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    grad[i] += g;
  }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

// Row-major strides; broadcast dimensions get stride 0 so one index walk
// serves both operands.
inline std::vector<size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<size_t> st(out.size(), 0);
  size_t stride = 1;
  for (size_t k = 0; k < in.size(); ++k) {
    size_t dim_in = in[in.size() - 1 - k];
    size_t pos = out.size() - 1 - k;
    st[pos] = (dim_in == 1) ? 0 : stride;
    stride *= dim_in;
  }
  return st;
}

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (size_t k = 0; k < rank; ++k) {
    size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1)
      throw ShapeError("incompatible broadcast shapes " + shape_str(a) + " vs " + shape_str(b));
    out[rank - 1 - k] = std::max(da, db);
  }
  return out;
}

// Walks every element of `out_shape`, handing the callback linear indices
// into out, a and b.
template <typename F>
void broadcast_walk(const Shape& out_shape, const Shape& a, const Shape& b, F&& f) {
  size_t n = numel(out_shape);
  size_t rank = out_shape.size();
  auto sa = broadcast_strides(a, out_shape);
  auto sb = broadcast_strides(b, out_shape);
  std::vector<size_t> idx(rank, 0);
  size_t ia = 0, ib = 0;
  for (size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (size_t k = rank; k-- > 0;) {
      idx[k]++;
      ia += sa[k];
      ib += sb[k];
      if (idx[k] < out_shape[k]) break;
      ia -= sa[k] * out_shape[k];
      ib -= sb[k] * out_shape[k];
      idx[k] = 0;
    }
  }
}

}  // namespace detail

class NoGradScope {
 public:
  NoGradScope() { detail::grad_enabled_flag(+1); }
  ~NoGradScope() { detail::grad_enabled_flag(-1); }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

class Tensor {
 public:
  Tensor() : n_(std::make_shared<detail::Node>()) {}

  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (numel(shape) != data.size())
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    Tensor t;
    t.n_->shape = std::move(shape);
    t.n_->value = std::move(data);
    t.n_->requires_grad = requires_grad;
    return t;
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> d(numel(shape), 0.0);
    return from(std::move(shape), std::move(d), requires_grad);
  }
  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    std::vector<double> d(numel(shape), v);
    return from(std::move(shape), std::move(d), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return from(Shape{}, {v}, requires_grad);
  }
  // 1-based positions 1..n, the source-index grid.
  static Tensor positions(size_t n) {
    std::vector<double> d(n);
    for (size_t j = 0; j < n; ++j) d[j] = double(j + 1);
    return from({n}, std::move(d));
  }

  const Shape& shape() const { return n_->shape; }
  size_t rank() const { return n_->shape.size(); }
  size_t size() const { return n_->value.size(); }
  size_t dim(size_t i) const { return n_->shape.at(i); }

  std::span<const double> data() const { return n_->value; }
  std::vector<double>& mutable_data() { return n_->value; }

  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of size " + std::to_string(size()));
    return n_->value[0];
  }
  double at(std::initializer_list<size_t> idx) const {
    if (idx.size() != rank()) throw ShapeError("index rank mismatch");
    size_t lin = 0, k = 0;
    for (size_t i : idx) {
      if (i >= n_->shape[k]) throw ShapeError("index out of range");
      lin = lin * n_->shape[k] + i;
      ++k;
    }
    return n_->value[lin];
  }

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    n_->requires_grad = v;
    return *this;
  }
  bool has_grad() const { return !n_->grad.empty(); }
  std::span<const double> grad() const {
    if (n_->grad.empty()) throw ContractError("no gradient recorded for this tensor");
    return n_->grad;
  }
  void zero_grad() {
    n_->grad.clear();
    n_->backward_ran = false;
  }

  // Reverse-mode sweep from a scalar root. Gradients accumulate additively
  // into every requires_grad ancestor; a second call on the same root
  // without zero_grad is an error.
  void backward() const {
    detail::Node* root = n_.get();
    if (size() != 1) throw ContractError("backward requires a scalar root, got " + shape_str(shape()));
    if (!root->requires_grad)
      throw ContractError("backward on a tensor that does not require grad");
    if (root->backward_ran)
      throw ContractError("backward already ran for this root; call zero_grad first");

    std::vector<detail::Node*> order;
    std::vector<std::pair<detail::Node*, size_t>> stack;
    std::vector<detail::Node*> seen;
    auto visited = [&](detail::Node* p) {
      return std::find(seen.begin(), seen.end(), p) != seen.end();
    };
    stack.push_back({root, 0});
    seen.push_back(root);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::Node* p = node->parents[next++].get();
        if (p->requires_grad && !visited(p)) {
          seen.push_back(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
    // Interior grads are scratch for this sweep; accumulation semantics
    // apply to leaves, which keep theirs until zero_grad.
    for (detail::Node* node : order)
      if (node->backward_fn) node->grad.clear();
    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node* node = *it;
      if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
    root->backward_ran = true;
  }

  std::shared_ptr<detail::Node> node() const { return n_; }

 private:
  std::shared_ptr<detail::Node> n_;

  friend Tensor make_op(const char* op, Shape shape, std::vector<double> value,
                        std::vector<Tensor> inputs,
                        std::function<void(detail::Node&)> backward_fn);
};

// Registers a new graph node. `backward_fn` reads the node's grad and
// accumulates into the captured parents; it is dropped entirely when no
// input requires grad (or grads are disabled), so inference builds no tape.
inline Tensor make_op(const char* op, Shape shape, std::vector<double> value,
                      std::vector<Tensor> inputs,
                      std::function<void(detail::Node&)> backward_fn) {
  Tensor t;
  t.n_->op = op;
  t.n_->shape = std::move(shape);
  t.n_->value = std::move(value);
  bool need = false;
  if (grad_enabled())
    for (const Tensor& in : inputs) need = need || in.requires_grad();
  t.n_->requires_grad = need;
  if (need) {
    t.n_->parents.reserve(inputs.size());
    for (const Tensor& in : inputs) t.n_->parents.push_back(in.node());
    t.n_->backward_fn = std::move(backward_fn);
  }
  return t;
}

namespace detail {

inline void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v)
    if (!std::isfinite(x)) throw ContractError(std::string("non-finite value produced by ") + op);
}

}  // namespace detail

// ---- elementwise binary ops with broadcasting ----

namespace detail {

template <typename Fwd, typename Bwd>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape());
  std::vector<double> out(numel(out_shape));
  const auto av = a.data();
  const auto bv = b.data();
  if (a.shape() == b.shape()) {
    for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    broadcast_walk(out_shape, a.shape(), b.shape(),
                   [&](size_t i, size_t ia, size_t ib) { out[i] = fwd(av[ia], bv[ib]); });
  }
  auto an = a.node();
  auto bn = b.node();
  Shape os = out_shape;
  return make_op(name, std::move(out_shape), std::move(out), {a, b},
                 [an, bn, os, bwd](Node& self) {
                   broadcast_walk(os, an->shape, bn->shape, [&](size_t i, size_t ia, size_t ib) {
                     double ga, gb;
                     bwd(self.grad[i], an->value[ia], bn->value[ib], self.value[i], ga, gb);
                     if (an->requires_grad) an->accumulate(ia, ga);
                     if (bn->requires_grad) bn->accumulate(ib, gb);
                   });
                 });
}

template <typename Fwd, typename Bwd>
Tensor unary_op(const char* name, const Tensor& a, Fwd fwd, Bwd bwd) {
  std::vector<double> out(a.size());
  const auto av = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  auto an = a.node();
  return make_op(name, a.shape(), std::move(out), {a}, [an, bwd](Node& self) {
    an->ensure_grad();
    for (size_t i = 0; i < self.value.size(); ++i)
      an->grad[i] += bwd(self.grad[i], an->value[i], self.value[i]);
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double, double, double& ga, double& gb) {
        ga = g;
        gb = g;
      });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double, double, double& ga, double& gb) {
        ga = g;
        gb = -g;
      });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double x, double y, double, double& ga, double& gb) {
        ga = g * y;
        gb = g * x;
      });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double g, double x, double y, double, double& ga, double& gb) {
        ga = g / y;
        gb = -g * x / (y * y);
      });
}
// Elementwise min; ties route the gradient to the first argument.
inline Tensor minimum(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      "min", a, b, [](double x, double y) { return std::min(x, y); },
      [](double g, double x, double y, double, double& ga, double& gb) {
        ga = x <= y ? g : 0.0;
        gb = x <= y ? 0.0 : g;
      });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  return detail::unary_op(
      "add_scalar", a, [s](double x) { return x + s; },
      [](double g, double, double) { return g; });
}
inline Tensor mul_scalar(const Tensor& a, double s) {
  return detail::unary_op(
      "mul_scalar", a, [s](double x) { return x * s; },
      [s](double g, double, double) { return g * s; });
}
inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(
      "exp", a, [](double x) { return std::exp(x); },
      [](double g, double, double y) { return g * y; });
}
inline Tensor log(const Tensor& a) {
  return detail::unary_op(
      "log", a, [](double x) { return std::log(x); },
      [](double g, double x, double) { return g / x; });
}
inline Tensor sqrt(const Tensor& a) {
  return detail::unary_op(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double g, double, double y) { return y > 0 ? g * 0.5 / y : 0.0; });
}
inline Tensor tanh(const Tensor& a) {
  return detail::unary_op(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double g, double, double y) { return g * (1.0 - y * y); });
}
inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}
inline Tensor sigmoid(const Tensor& a) {
  return detail::unary_op(
      "sigmoid", a, [](double x) { return sigmoid_scalar(x); },
      [](double g, double, double y) { return g * y * (1.0 - y); });
}
inline Tensor relu(const Tensor& a) {
  return detail::unary_op(
      "relu", a, [](double x) { return x > 0 ? x : 0.0; },
      [](double g, double x, double) { return x > 0 ? g : 0.0; });
}
// max(a, c); gradient passes where the input was not clamped.
inline Tensor clamp_min(const Tensor& a, double c) {
  return detail::unary_op(
      "clamp_min", a, [c](double x) { return x < c ? c : x; },
      [c](double g, double x, double) { return x < c ? 0.0 : g; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---- matmul ----

namespace detail {

// C[m x n] += A[m x k] * B[k x n], ikj order so the inner loop streams rows.
inline void mm_acc(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (size_t p = 0; p < k; ++p) {
      double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}
// C[m x k] += A[m x n] * B[k x n]^T  (rows dotted with rows)
inline void mm_nt_acc(const double* a, const double* b, double* c, size_t m, size_t n, size_t k) {
  for (size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * k;
    for (size_t j = 0; j < k; ++j) {
      const double* brow = b + j * n;
      double acc = 0.0;
      for (size_t p = 0; p < n; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}
// C[k x n] += A[m x k]^T * B[m x n]
inline void mm_tn_acc(const double* a, const double* b, double* c, size_t m, size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (size_t p = 0; p < k; ++p) {
      double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw ShapeError("matmul expects rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw ShapeError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  detail::mm_acc(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto an = a.node();
  auto bn = b.node();
  return make_op("matmul", {m, n}, std::move(out), {a, b}, [an, bn, m, k, n](detail::Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      detail::mm_nt_acc(self.grad.data(), bn->value.data(), an->grad.data(), m, n, k);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      detail::mm_tn_acc(an->value.data(), self.grad.data(), bn->grad.data(), m, k, n);
    }
  });
}

inline Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects rank-2, got " + shape_str(a.shape()));
  size_t r = a.dim(0), c = a.dim(1);
  std::vector<double> out(r * c);
  const auto av = a.data();
  for (size_t i = 0; i < r; ++i)
    for (size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  auto an = a.node();
  return make_op("transpose", {c, r}, std::move(out), {a}, [an, r, c](detail::Node& self) {
    an->ensure_grad();
    for (size_t i = 0; i < r; ++i)
      for (size_t j = 0; j < c; ++j) an->grad[i * c + j] += self.grad[j * r + i];
  });
}

// ---- reductions ----

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double x : a.data()) acc += x;
  auto an = a.node();
  return make_op("sum", Shape{}, {acc}, {a}, [an](detail::Node& self) {
    an->ensure_grad();
    double g = self.grad[0];
    for (double& gi : an->grad) gi += g;
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ContractError("mean of empty tensor");
  return mul_scalar(sum(a), 1.0 / double(a.size()));
}

namespace detail {
// Collapses `axis`, visiting each (outer, inner) slice.
struct AxisInfo {
  size_t outer, len, inner;
};
inline AxisInfo axis_info(const Shape& s, size_t axis) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisInfo ai{1, s[axis], 1};
  for (size_t i = 0; i < axis; ++i) ai.outer *= s[i];
  for (size_t i = axis + 1; i < s.size(); ++i) ai.inner *= s[i];
  return ai;
}
}  // namespace detail

inline Tensor sum(const Tensor& a, size_t axis, bool keepdim = false) {
  auto ai = detail::axis_info(a.shape(), axis);
  Shape out_shape = a.shape();
  if (keepdim)
    out_shape[axis] = 1;
  else
    out_shape.erase(out_shape.begin() + axis);
  std::vector<double> out(ai.outer * ai.inner, 0.0);
  const auto av = a.data();
  for (size_t o = 0; o < ai.outer; ++o)
    for (size_t l = 0; l < ai.len; ++l)
      for (size_t in = 0; in < ai.inner; ++in)
        out[o * ai.inner + in] += av[(o * ai.len + l) * ai.inner + in];
  auto an = a.node();
  return make_op("sum_axis", std::move(out_shape), std::move(out), {a}, [an, ai](detail::Node& self) {
    an->ensure_grad();
    for (size_t o = 0; o < ai.outer; ++o)
      for (size_t l = 0; l < ai.len; ++l)
        for (size_t in = 0; in < ai.inner; ++in)
          an->grad[(o * ai.len + l) * ai.inner + in] += self.grad[o * ai.inner + in];
  });
}

inline Tensor mean(const Tensor& a, size_t axis, bool keepdim = false) {
  auto ai = detail::axis_info(a.shape(), axis);
  return mul_scalar(sum(a, axis, keepdim), 1.0 / double(ai.len));
}

inline Tensor cumsum(const Tensor& a, size_t axis) {
  auto ai = detail::axis_info(a.shape(), axis);
  std::vector<double> out(a.size());
  const auto av = a.data();
  for (size_t o = 0; o < ai.outer; ++o)
    for (size_t in = 0; in < ai.inner; ++in) {
      double acc = 0.0;
      for (size_t l = 0; l < ai.len; ++l) {
        size_t i = (o * ai.len + l) * ai.inner + in;
        acc += av[i];
        out[i] = acc;
      }
    }
  auto an = a.node();
  return make_op("cumsum", a.shape(), std::move(out), {a}, [an, ai](detail::Node& self) {
    an->ensure_grad();
    for (size_t o = 0; o < ai.outer; ++o)
      for (size_t in = 0; in < ai.inner; ++in) {
        double acc = 0.0;
        for (size_t l = ai.len; l-- > 0;) {
          size_t i = (o * ai.len + l) * ai.inner + in;
          acc += self.grad[i];
          an->grad[i] += acc;
        }
      }
  });
}

// Numerically safe softmax: subtracts the per-slice maximum before exp.
inline Tensor softmax(const Tensor& a, size_t axis) {
  auto ai = detail::axis_info(a.shape(), axis);
  std::vector<double> out(a.size());
  const auto av = a.data();
  for (size_t o = 0; o < ai.outer; ++o)
    for (size_t in = 0; in < ai.inner; ++in) {
      double mx = -std::numeric_limits<double>::infinity();
      for (size_t l = 0; l < ai.len; ++l)
        mx = std::max(mx, av[(o * ai.len + l) * ai.inner + in]);
      double z = 0.0;
      for (size_t l = 0; l < ai.len; ++l) {
        size_t i = (o * ai.len + l) * ai.inner + in;
        out[i] = std::exp(av[i] - mx);
        z += out[i];
      }
      for (size_t l = 0; l < ai.len; ++l) out[(o * ai.len + l) * ai.inner + in] /= z;
    }
  auto an = a.node();
  return make_op("softmax", a.shape(), std::move(out), {a}, [an, ai](detail::Node& self) {
    an->ensure_grad();
    for (size_t o = 0; o < ai.outer; ++o)
      for (size_t in = 0; in < ai.inner; ++in) {
        double dot = 0.0;
        for (size_t l = 0; l < ai.len; ++l) {
          size_t i = (o * ai.len + l) * ai.inner + in;
          dot += self.grad[i] * self.value[i];
        }
        for (size_t l = 0; l < ai.len; ++l) {
          size_t i = (o * ai.len + l) * ai.inner + in;
          an->grad[i] += (self.grad[i] - dot) * self.value[i];
        }
      }
  });
}

// ---- shape ops ----

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  std::vector<double> out(a.data().begin(), a.data().end());
  auto an = a.node();
  return make_op("reshape", std::move(shape), std::move(out), {a}, [an](detail::Node& self) {
    an->ensure_grad();
    for (size_t i = 0; i < self.value.size(); ++i) an->grad[i] += self.grad[i];
  });
}

// Slice of the last axis: [..., L] -> [..., len] starting at `start`.
inline Tensor slice_last(const Tensor& a, size_t start, size_t len) {
  if (a.rank() == 0) throw ShapeError("slice_last on scalar");
  size_t L = a.shape().back();
  if (start + len > L) throw ShapeError("slice_last out of range");
  Shape out_shape = a.shape();
  out_shape.back() = len;
  size_t rows = a.size() / L;
  std::vector<double> out(rows * len);
  const auto av = a.data();
  for (size_t r = 0; r < rows; ++r)
    std::copy(av.begin() + r * L + start, av.begin() + r * L + start + len, out.begin() + r * len);
  auto an = a.node();
  return make_op("slice_last", std::move(out_shape), std::move(out), {a},
                 [an, start, len, L, rows](detail::Node& self) {
                   an->ensure_grad();
                   for (size_t r = 0; r < rows; ++r)
                     for (size_t j = 0; j < len; ++j)
                       an->grad[r * L + start + j] += self.grad[r * len + j];
                 });
}

inline Tensor concat_last(const std::vector<Tensor>& ts) {
  if (ts.empty()) throw ContractError("concat_last of nothing");
  Shape lead = ts[0].shape();
  lead.pop_back();
  size_t total = 0;
  for (const Tensor& t : ts) {
    Shape l = t.shape();
    size_t last = l.back();
    l.pop_back();
    if (l != lead) throw ShapeError("concat_last leading dims disagree");
    total += last;
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  size_t rows = numel(lead);
  std::vector<double> out(rows * total);
  size_t off = 0;
  for (const Tensor& t : ts) {
    size_t w = t.shape().back();
    const auto tv = t.data();
    for (size_t r = 0; r < rows; ++r)
      std::copy(tv.begin() + r * w, tv.begin() + (r + 1) * w, out.begin() + r * total + off);
    off += w;
  }
  std::vector<std::shared_ptr<detail::Node>> nodes;
  std::vector<size_t> widths;
  for (const Tensor& t : ts) {
    nodes.push_back(t.node());
    widths.push_back(t.shape().back());
  }
  return make_op("concat_last", std::move(out_shape), std::move(out), ts,
                 [nodes, widths, rows, total](detail::Node& self) {
                   size_t off = 0;
                   for (size_t k = 0; k < nodes.size(); ++k) {
                     if (nodes[k]->requires_grad) {
                       nodes[k]->ensure_grad();
                       for (size_t r = 0; r < rows; ++r)
                         for (size_t j = 0; j < widths[k]; ++j)
                           nodes[k]->grad[r * widths[k] + j] += self.grad[r * total + off + j];
                     }
                     off += widths[k];
                   }
                 });
}

// Row gather from a [R x C] matrix; backward scatter-adds, so repeated ids
// accumulate (embedding lookups).
inline Tensor take_rows(const Tensor& a, const std::vector<int>& ids) {
  if (a.rank() != 2) throw ShapeError("take_rows expects rank-2, got " + shape_str(a.shape()));
  size_t R = a.dim(0), C = a.dim(1);
  std::vector<double> out(ids.size() * C);
  const auto av = a.data();
  for (size_t r = 0; r < ids.size(); ++r) {
    int id = ids[r];
    if (id < 0 || size_t(id) >= R)
      throw ContractError("row id " + std::to_string(id) + " out of range [0," + std::to_string(R) + ")");
    std::copy(av.begin() + size_t(id) * C, av.begin() + (size_t(id) + 1) * C, out.begin() + r * C);
  }
  auto an = a.node();
  auto idcopy = ids;
  return make_op("take_rows", {ids.size(), C}, std::move(out), {a},
                 [an, idcopy, C](detail::Node& self) {
                   an->ensure_grad();
                   for (size_t r = 0; r < idcopy.size(); ++r)
                     for (size_t j = 0; j < C; ++j)
                       an->grad[size_t(idcopy[r]) * C + j] += self.grad[r * C + j];
                 });
}

// ---- gradient verification ----

// Central-difference check of reverse-mode gradients: returns the max over
// coordinates of |g_ad - g_fd| / max(1, |g_ad|, |g_fd|).
inline double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                                double h = 1e-5) {
  Tensor leaf = Tensor::from(x.shape(), {x.data().begin(), x.data().end()}, true);
  Tensor y = f(leaf);
  if (y.size() != 1) throw ContractError("finite_diff_check needs a scalar-valued function");
  if (!std::isfinite(y.item())) throw ContractError("finite_diff_check: non-finite f(x)");
  y.backward();
  std::vector<double> g_ad(leaf.grad().begin(), leaf.grad().end());

  double worst = 0.0;
  std::vector<double> base(x.data().begin(), x.data().end());
  NoGradScope ng;
  for (size_t i = 0; i < base.size(); ++i) {
    auto eval = [&](double v) {
      std::vector<double> d = base;
      d[i] = v;
      double out = f(Tensor::from(x.shape(), std::move(d))).item();
      if (!std::isfinite(out)) throw ContractError("finite_diff_check: non-finite f(x +/- h)");
      return out;
    };
    double g_fd = (eval(base[i] + h) - eval(base[i] - h)) / (2.0 * h);
    double denom = std::max({1.0, std::abs(g_ad[i]), std::abs(g_fd)});
    worst = std::max(worst, std::abs(g_ad[i] - g_fd) / denom);
  }
  return worst;
}

}  // namespace gma
