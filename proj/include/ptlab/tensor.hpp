// Copyright (c) 2026 ptlab contributors
// SPDX-License-Identifier: Apache-2.0
//
// Dense rank-1/2 tensors (row-major, 64-bit floats) with reverse-mode
// autodiff on an explicit tape. Every op validates shapes up front and
// checks its output for non-finite values; mask tensors (which carry -inf
// sentinels for attention) are constants that only softmax_rows consumes,
// so the finite invariant holds for everything an op produces.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ptlab/rng.hpp"

namespace ptlab {

struct TensorData {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward touches this tensor
  bool requires_grad = false;
  bool is_mask = false;  // may hold -inf sentinels; never fed to generic ops
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::size_t rows, std::size_t cols) {
    auto d = std::make_shared<TensorData>();
    d->rows = rows;
    d->cols = cols;
    d->data.assign(rows * cols, 0.0);
    return Tensor(std::move(d));
  }

  static Tensor full(std::size_t rows, std::size_t cols, double value) {
    Tensor t = zeros(rows, cols);
    std::fill(t.d_->data.begin(), t.d_->data.end(), value);
    return t;
  }

  static Tensor ones(std::size_t rows, std::size_t cols) { return full(rows, cols, 1.0); }

  static Tensor scalar(double value) { return full(1, 1, value); }

  static Tensor from(std::size_t rows, std::size_t cols, std::vector<double> values) {
    if (values.size() != rows * cols)
      throw std::invalid_argument("Tensor::from: value count does not match shape");
    auto d = std::make_shared<TensorData>();
    d->rows = rows;
    d->cols = cols;
    d->data = std::move(values);
    return Tensor(std::move(d));
  }

  static Tensor row(std::vector<double> values) {
    std::size_t n = values.size();
    return from(1, n, std::move(values));
  }

  bool valid() const { return static_cast<bool>(d_); }
  std::size_t rows() const { return d_ ? d_->rows : 0; }
  std::size_t cols() const { return d_ ? d_->cols : 0; }
  std::size_t size() const { return d_ ? d_->data.size() : 0; }

  double at(std::size_t i, std::size_t j) const {
    check_valid("at");
    if (i >= d_->rows || j >= d_->cols) throw std::out_of_range("Tensor::at: index out of range");
    return d_->data[i * d_->cols + j];
  }

  void set(std::size_t i, std::size_t j, double v) {
    check_valid("set");
    if (i >= d_->rows || j >= d_->cols) throw std::out_of_range("Tensor::set: index out of range");
    d_->data[i * d_->cols + j] = v;
  }

  double item() const {
    check_valid("item");
    if (d_->rows != 1 || d_->cols != 1)
      throw std::invalid_argument("Tensor::item: tensor is not 1x1");
    return d_->data[0];
  }

  const std::vector<double>& values() const {
    check_valid("values");
    return d_->data;
  }

  std::vector<double>& mutable_values() {
    check_valid("mutable_values");
    return d_->data;
  }

  bool requires_grad() const { return d_ && d_->requires_grad; }

  Tensor& set_requires_grad(bool on) {
    check_valid("set_requires_grad");
    d_->requires_grad = on;
    return *this;
  }

  bool is_mask() const { return d_ && d_->is_mask; }

  bool has_grad() const { return d_ && !d_->grad.empty(); }

  const std::vector<double>& grad() const {
    check_valid("grad");
    if (d_->grad.empty()) throw std::runtime_error("Tensor::grad: no gradient has been accumulated");
    return d_->grad;
  }

  double grad_at(std::size_t i, std::size_t j) const {
    const auto& g = grad();
    if (i >= d_->rows || j >= d_->cols) throw std::out_of_range("Tensor::grad_at: index out of range");
    return g[i * d_->cols + j];
  }

  void zero_grad() {
    check_valid("zero_grad");
    d_->grad.clear();
  }

  // Deep copy of values and flags; gradient state is not carried over.
  Tensor copy() const {
    check_valid("copy");
    auto d = std::make_shared<TensorData>();
    d->rows = d_->rows;
    d->cols = d_->cols;
    d->data = d_->data;
    d->requires_grad = d_->requires_grad;
    d->is_mask = d_->is_mask;
    return Tensor(std::move(d));
  }

  Tensor detached_copy() const {
    Tensor t = copy();
    t.d_->requires_grad = false;
    return t;
  }

  const std::shared_ptr<TensorData>& impl() const { return d_; }

  static Tensor wrap(std::shared_ptr<TensorData> d) { return Tensor(std::move(d)); }

 private:
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}

  void check_valid(const char* what) const {
    if (!d_) throw std::runtime_error(std::string("Tensor::") + what + ": empty tensor handle");
  }

  std::shared_ptr<TensorData> d_;
};

namespace detail {

inline std::string shape_str(const Tensor& t) {
  return std::to_string(t.rows()) + "x" + std::to_string(t.cols());
}

inline void check_finite(const TensorData& t, const char* op) {
  for (double v : t.data) {
    if (!std::isfinite(v))
      throw std::runtime_error(std::string(op) + ": produced a non-finite value");
  }
}

inline std::vector<double>& ensure_grad(TensorData& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
  return t.grad;
}

inline void reject_mask(const Tensor& t, const char* op) {
  if (t.is_mask())
    throw std::invalid_argument(std::string(op) + ": mask tensors are only accepted by softmax_rows");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

class Tape;

namespace detail {
inline Tape*& tape_top() {
  thread_local Tape* top = nullptr;
  return top;
}
}  // namespace detail

class Tape {
 public:
  Tape() : prev_(detail::tape_top()) { detail::tape_top() = this; }
  ~Tape() { detail::tape_top() = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return detail::tape_top(); }

  void record(std::shared_ptr<TensorData> out, std::function<void()> backward) {
    nodes_.push_back(Node{std::move(out), std::move(backward)});
  }

  std::size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = 1 and walks the tape in reverse. Gradients of
  // leaf tensors (not produced on this tape) persist and accumulate across
  // calls; gradients of tape-produced intermediates are per-call scratch and
  // are reset here, so a second backward (same or different loss) adds
  // exactly one more contribution to each leaf.
  void backward(const Tensor& loss) {
    if (!loss.valid()) throw std::invalid_argument("Tape::backward: empty loss tensor");
    if (loss.rows() != 1 || loss.cols() != 1)
      throw std::invalid_argument("Tape::backward: loss must be a 1x1 scalar, got " +
                                  detail::shape_str(loss));
    bool attached = false;
    for (const Node& n : nodes_) {
      n.out->grad.clear();
      if (n.out == loss.impl()) attached = true;
    }
    if (!attached)
      throw std::runtime_error("Tape::backward: loss tensor was not produced on this tape");
    detail::ensure_grad(*loss.impl())[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (it->out->grad.empty()) continue;  // nothing downstream pulled on this node
      it->backward();
    }
  }

 private:
  struct Node {
    std::shared_ptr<TensorData> out;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
  Tape* prev_ = nullptr;
};

// Temporarily disables recording (e.g. inside evaluation or reference paths
// that must not grow an enclosing tape).
class TapePause {
 public:
  TapePause() : saved_(detail::tape_top()) { detail::tape_top() = nullptr; }
  ~TapePause() { detail::tape_top() = saved_; }
  TapePause(const TapePause&) = delete;
  TapePause& operator=(const TapePause&) = delete;

 private:
  Tape* saved_;
};

namespace detail {

inline bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::current()) return false;
  for (const Tensor* t : inputs) {
    if (t->valid() && t->requires_grad()) return true;
  }
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Raw kernels (shared by forward and backward passes)
// ---------------------------------------------------------------------------

namespace raw {

// C[m x n] = A[m x k] * B[k x n]
inline void mm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                  std::size_t n) {
  std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      double av = a[i * k + p];
      const double* brow = b + p * n;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x k] += A[m x n] * B[k x n]^T
inline void mm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                      std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0.0;
      const double* arow = a + i * n;
      const double* brow = b + j * n;
      for (std::size_t p = 0; p < n; ++p) s += arow[p] * brow[p];
      c[i * k + j] += s;
    }
  }
}

// C[k x n] += A[m x k]^T * B[m x n]
inline void mm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                      std::size_t n) {
  for (std::size_t p = 0; p < m; ++p) {
    for (std::size_t i = 0; i < k; ++i) {
      double av = a[p * k + i];
      const double* brow = b + p * n;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace raw

// ---------------------------------------------------------------------------
// Core ops
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument("matmul: empty operand");
  detail::reject_mask(a, "matmul");
  detail::reject_mask(b, "matmul");
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: inner dimensions mismatch (" + detail::shape_str(a) +
                                " vs " + detail::shape_str(b) + ")");
  std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = Tensor::zeros(m, n);
  raw::mm_nn(a.values().data(), b.values().data(), out.mutable_values().data(), m, k, n);
  detail::check_finite(*out.impl(), "matmul");
  if (detail::tracking({&a, &b})) {
    out.set_requires_grad(true);
    auto ad = a.impl(), bd = b.impl(), od = out.impl();
    Tape::current()->record(od, [ad, bd, od, m, k, n] {
      const double* g = od->grad.data();
      if (ad->requires_grad)
        raw::mm_nt_acc(g, bd->data.data(), detail::ensure_grad(*ad).data(), m, n, k);
      if (bd->requires_grad)
        raw::mm_tn_acc(ad->data.data(), g, detail::ensure_grad(*bd).data(), m, k, n);
    });
  }
  return out;
}

inline Tensor transpose(const Tensor& a) {
  if (!a.valid()) throw std::invalid_argument("transpose: empty operand");
  detail::reject_mask(a, "transpose");
  std::size_t m = a.rows(), n = a.cols();
  Tensor out = Tensor::zeros(n, m);
  {
    const double* x = a.values().data();
    double* y = out.mutable_values().data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) y[j * m + i] = x[i * n + j];
  }
  if (detail::tracking({&a})) {
    out.set_requires_grad(true);
    auto ad = a.impl(), od = out.impl();
    Tape::current()->record(od, [ad, od, m, n] {
      if (!ad->requires_grad) return;
      double* ga = detail::ensure_grad(*ad).data();
      const double* go = od->grad.data();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += go[j * m + i];
    });
  }
  return out;
}

namespace detail {

// Broadcast classification for binary elementwise ops. Exactly three cases
// are supported: same shape, scalar (1x1) with matrix, and row (1xN) with
// matrix ([M x N]).
struct Broadcast {
  std::size_t rows = 0, cols = 0;  // output shape
  bool a_scalar = false, a_row = false;
  bool b_scalar = false, b_row = false;

  std::size_t a_index(std::size_t i, std::size_t j) const {
    if (a_scalar) return 0;
    if (a_row) return j;
    return i * cols + j;
  }
  std::size_t b_index(std::size_t i, std::size_t j) const {
    if (b_scalar) return 0;
    if (b_row) return j;
    return i * cols + j;
  }
};

inline Broadcast classify_broadcast(const Tensor& a, const Tensor& b, const char* op) {
  Broadcast bc;
  if (a.rows() == b.rows() && a.cols() == b.cols()) {
    bc.rows = a.rows();
    bc.cols = a.cols();
    return bc;
  }
  if (a.rows() == 1 && a.cols() == 1) {
    bc.rows = b.rows();
    bc.cols = b.cols();
    bc.a_scalar = true;
    return bc;
  }
  if (b.rows() == 1 && b.cols() == 1) {
    bc.rows = a.rows();
    bc.cols = a.cols();
    bc.b_scalar = true;
    return bc;
  }
  if (a.rows() == 1 && a.cols() == b.cols()) {
    bc.rows = b.rows();
    bc.cols = b.cols();
    bc.a_row = true;
    return bc;
  }
  if (b.rows() == 1 && b.cols() == a.cols()) {
    bc.rows = a.rows();
    bc.cols = a.cols();
    bc.b_row = true;
    return bc;
  }
  throw std::invalid_argument(std::string(op) + ": shapes are not broadcast-compatible (" +
                              shape_str(a) + " vs " + shape_str(b) + ")");
}

// Shared machinery for binary elementwise ops. fwd maps (x, y) to the output
// value; dfx/dfy give the partials with respect to each operand at (x, y).
// Gradient reduction over broadcast dimensions falls out of add-into
// accumulation at the mapped indices.
template <class F, class DX, class DY>
Tensor ew_binary(const Tensor& a, const Tensor& b, F fwd, DX dfx, DY dfy, const char* op) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument(std::string(op) + ": empty operand");
  reject_mask(a, op);
  reject_mask(b, op);
  Broadcast bc = classify_broadcast(a, b, op);
  Tensor out = Tensor::zeros(bc.rows, bc.cols);
  {
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* po = out.mutable_values().data();
    for (std::size_t i = 0; i < bc.rows; ++i)
      for (std::size_t j = 0; j < bc.cols; ++j)
        po[i * bc.cols + j] = fwd(pa[bc.a_index(i, j)], pb[bc.b_index(i, j)]);
  }
  check_finite(*out.impl(), op);
  if (tracking({&a, &b})) {
    out.set_requires_grad(true);
    auto ad = a.impl(), bd = b.impl(), od = out.impl();
    Tape::current()->record(od, [ad, bd, od, bc, dfx, dfy] {
      const double* g = od->grad.data();
      const double* pa = ad->data.data();
      const double* pb = bd->data.data();
      double* ga = ad->requires_grad ? ensure_grad(*ad).data() : nullptr;
      double* gb = bd->requires_grad ? ensure_grad(*bd).data() : nullptr;
      for (std::size_t i = 0; i < bc.rows; ++i) {
        for (std::size_t j = 0; j < bc.cols; ++j) {
          std::size_t ia = bc.a_index(i, j), ib = bc.b_index(i, j), io = i * bc.cols + j;
          if (ga) ga[ia] += dfx(pa[ia], pb[ib]) * g[io];
          if (gb) gb[ib] += dfy(pa[ia], pb[ib]) * g[io];
        }
      }
    });
  }
  return out;
}

// Shared machinery for unary elementwise ops; df receives (x, y) so that
// derivatives expressible via the output (e.g. exp) avoid recomputation.
template <class F, class DF>
Tensor ew_unary(const Tensor& a, F fwd, DF df, const char* op) {
  if (!a.valid()) throw std::invalid_argument(std::string(op) + ": empty operand");
  reject_mask(a, op);
  Tensor out = Tensor::zeros(a.rows(), a.cols());
  {
    const double* pa = a.values().data();
    double* po = out.mutable_values().data();
    for (std::size_t i = 0; i < a.size(); ++i) po[i] = fwd(pa[i]);
  }
  check_finite(*out.impl(), op);
  if (tracking({&a})) {
    out.set_requires_grad(true);
    auto ad = a.impl(), od = out.impl();
    Tape::current()->record(od, [ad, od, df] {
      if (!ad->requires_grad) return;
      const double* g = od->grad.data();
      const double* pa = ad->data.data();
      const double* po = od->data.data();
      double* ga = ensure_grad(*ad).data();
      for (std::size_t i = 0; i < ad->data.size(); ++i) ga[i] += df(pa[i], po[i]) * g[i];
    });
  }
  return out;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::ew_binary(
      a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; }, "add");
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::ew_binary(
      a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; }, "sub");
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::ew_binary(
      a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; }, "mul");
}

// Division guards against tiny denominators: any |y| < 1e-12 raises instead
// of letting an Inf/NaN propagate.
inline Tensor divide(const Tensor& a, const Tensor& b) {
  {
    if (!b.valid()) throw std::invalid_argument("divide: empty operand");
    for (double y : b.values()) {
      if (std::abs(y) < 1e-12)
        throw std::runtime_error("divide: denominator magnitude below 1e-12");
    }
  }
  return detail::ew_binary(
      a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); }, "divide");
}

inline Tensor scale(const Tensor& a, double s) {
  if (!std::isfinite(s)) throw std::invalid_argument("scale: factor must be finite");
  return detail::ew_unary(
      a, [s](double x) { return s * x; }, [s](double, double) { return s; }, "scale");
}

inline Tensor vexp(const Tensor& a) {
  return detail::ew_unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; }, "exp");
}

inline Tensor vlog(const Tensor& a) {
  if (a.valid()) {
    for (double x : a.values())
      if (!(x > 0.0)) throw std::runtime_error("log: input must be strictly positive");
  }
  return detail::ew_unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; }, "log");
}

inline Tensor vsqrt(const Tensor& a) {
  if (a.valid()) {
    for (double x : a.values())
      if (x < 0.0) throw std::runtime_error("sqrt: input must be non-negative");
  }
  return detail::ew_unary(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; }, "sqrt");
}

inline Tensor elu(const Tensor& a) {
  return detail::ew_unary(
      a, [](double x) { return x > 0.0 ? x : std::expm1(x); },
      [](double x, double y) { return x > 0.0 ? 1.0 : y + 1.0; }, "elu");
}

inline Tensor relu(const Tensor& a) {
  return detail::ew_unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; }, "relu");
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

enum class EwTag { Add, Sub, Mul, Divide, Exp, Log, Sqrt, Elu, Relu, Neg };

// Tag-dispatched front door for elementwise ops; binary tags require the
// second operand, unary tags reject it.
inline Tensor elementwise(EwTag tag, const Tensor& a, const Tensor& b = Tensor()) {
  auto need_b = [&](const char* op) {
    if (!b.valid()) throw std::invalid_argument(std::string(op) + ": second operand required");
  };
  auto no_b = [&](const char* op) {
    if (b.valid()) throw std::invalid_argument(std::string(op) + ": op takes a single operand");
  };
  switch (tag) {
    case EwTag::Add: need_b("add"); return add(a, b);
    case EwTag::Sub: need_b("sub"); return sub(a, b);
    case EwTag::Mul: need_b("mul"); return mul(a, b);
    case EwTag::Divide: need_b("divide"); return divide(a, b);
    case EwTag::Exp: no_b("exp"); return vexp(a);
    case EwTag::Log: no_b("log"); return vlog(a);
    case EwTag::Sqrt: no_b("sqrt"); return vsqrt(a);
    case EwTag::Elu: no_b("elu"); return elu(a);
    case EwTag::Relu: no_b("relu"); return relu(a);
    case EwTag::Neg: no_b("neg"); return neg(a);
  }
  throw std::invalid_argument("elementwise: unknown op tag");
}

// ---------------------------------------------------------------------------
// Masks and softmax
// ---------------------------------------------------------------------------

// Additive mask for causal self-attention over n positions: 0 on and below
// the diagonal, -inf above it.
inline Tensor causal_mask(std::size_t n) {
  Tensor m = Tensor::zeros(n, n);
  double* p = m.mutable_values().data();
  const double ninf = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) p[i * n + j] = ninf;
  m.impl()->is_mask = true;
  return m;
}

// Additive mask for n query positions over (p prefix + n input) keys: prefix
// columns are always visible, input columns are causal.
inline Tensor prefix_causal_mask(std::size_t n, std::size_t p) {
  Tensor m = Tensor::zeros(n, p + n);
  double* v = m.mutable_values().data();
  const double ninf = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) v[i * (p + n) + p + j] = ninf;
  m.impl()->is_mask = true;
  return m;
}

// Row-wise softmax with optional additive mask. Masked entries (-inf) are
// excluded from the row max and receive exactly-zero probability. A fully
// masked row is an error. Stabilised by subtracting the row max before exp.
inline Tensor softmax_rows(const Tensor& a, const Tensor& mask = Tensor()) {
  if (!a.valid()) throw std::invalid_argument("softmax_rows: empty operand");
  detail::reject_mask(a, "softmax_rows");
  const double ninf = -std::numeric_limits<double>::infinity();
  if (mask.valid()) {
    if (mask.rows() != a.rows() || mask.cols() != a.cols())
      throw std::invalid_argument("softmax_rows: mask shape " + detail::shape_str(mask) +
                                  " does not match input " + detail::shape_str(a));
    for (double v : mask.values()) {
      if (!(v == 0.0 || v == ninf))
        throw std::invalid_argument("softmax_rows: mask entries must be 0 or -inf");
    }
  }
  std::size_t m = a.rows(), n = a.cols();
  Tensor out = Tensor::zeros(m, n);
  {
    const double* x = a.values().data();
    const double* mk = mask.valid() ? mask.values().data() : nullptr;
    double* y = out.mutable_values().data();
    for (std::size_t i = 0; i < m; ++i) {
      double mx = ninf;
      for (std::size_t j = 0; j < n; ++j) {
        if (mk && mk[i * n + j] == ninf) continue;
        mx = std::max(mx, x[i * n + j]);
      }
      if (mx == ninf)
        throw std::runtime_error("softmax_rows: row " + std::to_string(i) + " is fully masked");
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        double e = 0.0;
        if (!(mk && mk[i * n + j] == ninf)) e = std::exp(x[i * n + j] - mx);
        y[i * n + j] = e;
        s += e;
      }
      for (std::size_t j = 0; j < n; ++j) y[i * n + j] /= s;
    }
  }
  detail::check_finite(*out.impl(), "softmax_rows");
  if (detail::tracking({&a})) {
    out.set_requires_grad(true);
    auto ad = a.impl(), od = out.impl();
    Tape::current()->record(od, [ad, od, m, n] {
      if (!ad->requires_grad) return;
      const double* g = od->grad.data();
      const double* y = od->data.data();
      double* ga = detail::ensure_grad(*ad).data();
      for (std::size_t i = 0; i < m; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
        for (std::size_t j = 0; j < n; ++j)
          ga[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
      }
    });
  }
  return out;
}

// Row-wise log-softmax (numerically safe route to cross-entropy; avoids
// log(softmax(...)) underflow).
inline Tensor log_softmax_rows(const Tensor& a) {
  if (!a.valid()) throw std::invalid_argument("log_softmax_rows: empty operand");
  detail::reject_mask(a, "log_softmax_rows");
  std::size_t m = a.rows(), n = a.cols();
  if (n == 0) throw std::invalid_argument("log_softmax_rows: zero-width input");
  Tensor out = Tensor::zeros(m, n);
  {
    const double* x = a.values().data();
    double* y = out.mutable_values().data();
    for (std::size_t i = 0; i < m; ++i) {
      double mx = x[i * n];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[i * n + j]);
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += std::exp(x[i * n + j] - mx);
      double lse = mx + std::log(s);
      for (std::size_t j = 0; j < n; ++j) y[i * n + j] = x[i * n + j] - lse;
    }
  }
  detail::check_finite(*out.impl(), "log_softmax_rows");
  if (detail::tracking({&a})) {
    out.set_requires_grad(true);
    auto ad = a.impl(), od = out.impl();
    Tape::current()->record(od, [ad, od, m, n] {
      if (!ad->requires_grad) return;
      const double* g = od->grad.data();
      const double* y = od->data.data();
      double* ga = detail::ensure_grad(*ad).data();
      for (std::size_t i = 0; i < m; ++i) {
        double gs = 0.0;
        for (std::size_t j = 0; j < n; ++j) gs += g[i * n + j];
        for (std::size_t j = 0; j < n; ++j)
          ga[i * n + j] += g[i * n + j] - std::exp(y[i * n + j]) * gs;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions, concatenation, slicing
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
  if (!a.valid()) throw std::invalid_argument("sum_all: empty operand");
  detail::reject_mask(a, "sum_all");
  double s = 0.0;
  for (double v : a.values()) s += v;
  Tensor out = Tensor::scalar(s);
  detail::check_finite(*out.impl(), "sum_all");
  if (detail::tracking({&a})) {
    out.set_requires_grad(true);
    auto ad = a.impl(), od = out.impl();
    Tape::current()->record(od, [ad, od] {
      if (!ad->requires_grad) return;
      double g = od->grad[0];
      double* ga = detail::ensure_grad(*ad).data();
      for (std::size_t i = 0; i < ad->data.size(); ++i) ga[i] += g;
    });
  }
  return out;
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument("concat_rows: empty operand");
  detail::reject_mask(a, "concat_rows");
  detail::reject_mask(b, "concat_rows");
  if (a.cols() != b.cols())
    throw std::invalid_argument("concat_rows: column counts differ (" + detail::shape_str(a) +
                                " vs " + detail::shape_str(b) + ")");
  std::size_t ra = a.rows(), rb = b.rows(), n = a.cols();
  Tensor out = Tensor::zeros(ra + rb, n);
  {
    double* y = out.mutable_values().data();
    std::copy(a.values().begin(), a.values().end(), y);
    std::copy(b.values().begin(), b.values().end(), y + ra * n);
  }
  if (detail::tracking({&a, &b})) {
    out.set_requires_grad(true);
    auto ad = a.impl(), bd = b.impl(), od = out.impl();
    Tape::current()->record(od, [ad, bd, od, ra, rb, n] {
      const double* g = od->grad.data();
      if (ad->requires_grad) {
        double* ga = detail::ensure_grad(*ad).data();
        for (std::size_t i = 0; i < ra * n; ++i) ga[i] += g[i];
      }
      if (bd->requires_grad) {
        double* gb = detail::ensure_grad(*bd).data();
        for (std::size_t i = 0; i < rb * n; ++i) gb[i] += g[ra * n + i];
      }
    });
  }
  return out;
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (!a.valid() || !b.valid()) throw std::invalid_argument("concat_cols: empty operand");
  detail::reject_mask(a, "concat_cols");
  detail::reject_mask(b, "concat_cols");
  if (a.rows() != b.rows())
    throw std::invalid_argument("concat_cols: row counts differ (" + detail::shape_str(a) +
                                " vs " + detail::shape_str(b) + ")");
  std::size_t m = a.rows(), ca = a.cols(), cb = b.cols();
  Tensor out = Tensor::zeros(m, ca + cb);
  {
    const double* pa = a.values().data();
    const double* pb = b.values().data();
    double* y = out.mutable_values().data();
    for (std::size_t i = 0; i < m; ++i) {
      std::copy(pa + i * ca, pa + (i + 1) * ca, y + i * (ca + cb));
      std::copy(pb + i * cb, pb + (i + 1) * cb, y + i * (ca + cb) + ca);
    }
  }
  if (detail::tracking({&a, &b})) {
    out.set_requires_grad(true);
    auto ad = a.impl(), bd = b.impl(), od = out.impl();
    Tape::current()->record(od, [ad, bd, od, m, ca, cb] {
      const double* g = od->grad.data();
      if (ad->requires_grad) {
        double* ga = detail::ensure_grad(*ad).data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < ca; ++j) ga[i * ca + j] += g[i * (ca + cb) + j];
      }
      if (bd->requires_grad) {
        double* gb = detail::ensure_grad(*bd).data();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < cb; ++j) gb[i * cb + j] += g[i * (ca + cb) + ca + j];
      }
    });
  }
  return out;
}

// Half-open row range [r0, r1).
inline Tensor slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
  if (!a.valid()) throw std::invalid_argument("slice_rows: empty operand");
  detail::reject_mask(a, "slice_rows");
  if (r0 > r1 || r1 > a.rows())
    throw std::out_of_range("slice_rows: range [" + std::to_string(r0) + ", " +
                            std::to_string(r1) + ") out of bounds for " + detail::shape_str(a));
  std::size_t n = a.cols(), m = r1 - r0;
  Tensor out = Tensor::zeros(m, n);
  std::copy(a.values().begin() + r0 * n, a.values().begin() + r1 * n,
            out.mutable_values().begin());
  if (detail::tracking({&a})) {
    out.set_requires_grad(true);
    auto ad = a.impl(), od = out.impl();
    Tape::current()->record(od, [ad, od, r0, m, n] {
      if (!ad->requires_grad) return;
      const double* g = od->grad.data();
      double* ga = detail::ensure_grad(*ad).data();
      for (std::size_t i = 0; i < m * n; ++i) ga[r0 * n + i] += g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Finite differences (no tape; reference gradients for tests and checks)
// ---------------------------------------------------------------------------

inline Tensor finite_diff(const std::function<double(const Tensor&)>& f, const Tensor& x,
                          double h = 1e-5) {
  if (!x.valid()) throw std::invalid_argument("finite_diff: empty tensor");
  if (!(h > 0.0)) throw std::invalid_argument("finite_diff: step must be positive");
  TapePause pause;
  Tensor g = Tensor::zeros(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor xp = x.detached_copy();
    Tensor xm = x.detached_copy();
    xp.mutable_values()[i] += h;
    xm.mutable_values()[i] -= h;
    double fp = f(xp);
    double fm = f(xm);
    g.mutable_values()[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Convenience numeric helpers shared across modules.
inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("max_abs_diff: shape mismatch (" + detail::shape_str(a) + " vs " +
                                detail::shape_str(b) + ")");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

inline double frobenius_norm(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v * v;
  return std::sqrt(s);
}

inline Tensor random_tensor(std::size_t rows, std::size_t cols, SplitRng& rng,
                            double stddev = 1.0) {
  Tensor t = Tensor::zeros(rows, cols);
  for (double& v : t.mutable_values()) v = rng.normal(0.0, stddev);
  return t;
}

}  // namespace ptlab
