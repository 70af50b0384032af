#pragma once

// Minimal reverse-mode autodiff over row-major matrices.
//
// A Tape records operations in creation order; backward() walks it in reverse.
// Tensor is a lightweight handle (tape, node id). Values live in a chunked
// arena owned by the tape, so handles stay valid until reset().
// Parameters are leaves whose value/grad buffers live in a Parameter, so
// gradients accumulate there directly.

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "emcomm/error.hpp"
#include "emcomm/random.hpp"

namespace emcomm::diff {

struct Parameter {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::vector<double> value;
  std::vector<double> grad;

  Parameter() = default;
  Parameter(std::string n, int r, int c)
      : name(std::move(n)), rows(r), cols(c), value(static_cast<std::size_t>(r) * c, 0.0),
        grad(static_cast<std::size_t>(r) * c, 0.0) {}

  std::size_t size() const { return value.size(); }
};

enum class Op : uint8_t {
  leaf,
  affine,
  matmul,
  matmul_bt,
  tanh,
  relu,
  add,
  sub,
  mul,
  scale,
  combine,
  concat_cols,
  reshape,
  slice,
  softmax,
  log_softmax,
  sum,
  straight_through,
  cross_entropy,
  kl,
};

class Tape;

struct Tensor {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  int rows() const;
  int cols() const;
  std::size_t size() const { return static_cast<std::size_t>(rows()) * cols(); }
  std::span<const double> values() const;
  std::span<const double> grads() const;
  double value(std::size_t i = 0) const { return values()[i]; }
  double at(int r, int c) const { return values()[static_cast<std::size_t>(r) * cols() + c]; }
};

class Tape {
 public:
  struct Node {
    Op op = Op::leaf;
    int rows = 0;
    int cols = 0;
    double* v = nullptr;
    double* g = nullptr;
    double* aux = nullptr;
    int a = -1;
    int b = -1;
    int c = -1;
    int i0 = 0;
    int i1 = 0;
    int extra_begin = 0;
    int extra_count = 0;
    double scalar = 0.0;
    bool needs_grad = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // With grad disabled, parameter leaves do not request gradients, so the
  // whole graph is forward-only.
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  void reset() {
    nodes_.clear();
    extras_.clear();
    coeffs_.clear();
    big_.clear();
    chunk_ = 0;
    offset_ = 0;
  }

  std::size_t node_count() const { return nodes_.size(); }
  const Node& node(int id) const { return nodes_[id]; }

  Tensor param(Parameter& p) {
    Node n;
    n.rows = p.rows;
    n.cols = p.cols;
    n.v = p.value.data();
    n.needs_grad = grad_enabled_;
    n.g = grad_enabled_ ? p.grad.data() : nullptr;
    return push(n);
  }

  Tensor constant(int rows, int cols, std::span<const double> values) {
    if (values.size() != static_cast<std::size_t>(rows) * cols)
      throw Error(ErrorCode::ShapeMismatch, "constant: " + std::to_string(values.size()) + " values for " +
                                                std::to_string(rows) + "x" + std::to_string(cols));
    Node n;
    n.rows = rows;
    n.cols = cols;
    n.v = alloc(values.size());
    std::copy(values.begin(), values.end(), n.v);
    return push(n);
  }

  // Leaf that receives a gradient buffer; used by gradient checks.
  Tensor variable(int rows, int cols, std::span<const double> values) {
    Tensor t = constant(rows, cols, values);
    Node& n = nodes_[t.id];
    n.needs_grad = true;
    n.g = alloc(values.size());
    return t;
  }

  Tensor zeros(int rows, int cols) {
    Node n;
    n.rows = rows;
    n.cols = cols;
    n.v = alloc(static_cast<std::size_t>(rows) * cols);
    return push(n);
  }

  // Reverse pass from a scalar. Gradients of parameters accumulate.
  void backward(Tensor loss, double seed = 1.0) {
    Node& l = nodes_[loss.id];
    if (l.rows * l.cols != 1) throw Error(ErrorCode::ShapeMismatch, "backward needs a scalar loss");
    if (!l.needs_grad) return;
    l.g[0] += seed;
    for (int id = loss.id; id >= 0; --id) {
      if (nodes_[id].needs_grad) backprop(id);
    }
  }

  // Internal node construction used by the op functions below.
  Tensor make(Op op, int rows, int cols, std::initializer_list<int> parents) {
    Node n;
    n.op = op;
    n.rows = rows;
    n.cols = cols;
    auto it = parents.begin();
    if (it != parents.end()) n.a = *it++;
    if (it != parents.end()) n.b = *it++;
    if (it != parents.end()) n.c = *it++;
    for (int p : parents)
      if (p >= 0 && nodes_[p].needs_grad) n.needs_grad = true;
    n.v = alloc(static_cast<std::size_t>(rows) * cols);
    if (n.needs_grad) n.g = alloc(static_cast<std::size_t>(rows) * cols);
    return push(n);
  }

  Tensor make_list(Op op, int rows, int cols, std::span<const Tensor> parents, std::span<const double> coeffs = {}) {
    Node n;
    n.op = op;
    n.rows = rows;
    n.cols = cols;
    n.extra_begin = static_cast<int>(extras_.size());
    n.extra_count = static_cast<int>(parents.size());
    for (const auto& p : parents) {
      extras_.push_back(p.id);
      if (nodes_[p.id].needs_grad) n.needs_grad = true;
    }
    n.i0 = static_cast<int>(coeffs_.size());
    for (double c : coeffs) coeffs_.push_back(c);
    n.v = alloc(static_cast<std::size_t>(rows) * cols);
    if (n.needs_grad) n.g = alloc(static_cast<std::size_t>(rows) * cols);
    return push(n);
  }

  Node& mut(int id) { return nodes_[id]; }
  double* alloc(std::size_t n) {
    if (n == 0) n = 1;
    if (n > kChunk) {
      big_.push_back(std::make_unique_for_overwrite<double[]>(n));
      double* p = big_.back().get();
      std::fill(p, p + n, 0.0);
      return p;
    }
    while (true) {
      if (chunk_ == chunks_.size()) chunks_.push_back(std::make_unique_for_overwrite<double[]>(kChunk));
      if (offset_ + n <= kChunk) {
        double* p = chunks_[chunk_].get() + offset_;
        offset_ += n;
        std::fill(p, p + n, 0.0);
        return p;
      }
      ++chunk_;
      offset_ = 0;
    }
  }
  const std::vector<int>& extras() const { return extras_; }
  const std::vector<double>& coeffs() const { return coeffs_; }

 private:
  static constexpr std::size_t kChunk = 1 << 16;

  Tensor push(const Node& n) {
    nodes_.push_back(n);
    return Tensor{this, static_cast<int>(nodes_.size()) - 1};
  }

  void backprop(int id);

  std::vector<Node> nodes_;
  std::vector<int> extras_;
  std::vector<double> coeffs_;
  std::vector<std::unique_ptr<double[]>> chunks_;
  std::vector<std::unique_ptr<double[]>> big_;
  std::size_t chunk_ = 0;
  std::size_t offset_ = 0;
  bool grad_enabled_ = true;
};

inline int Tensor::rows() const { return tape->node(id).rows; }
inline int Tensor::cols() const { return tape->node(id).cols; }
inline std::span<const double> Tensor::values() const {
  const auto& n = tape->node(id);
  return {n.v, static_cast<std::size_t>(n.rows) * n.cols};
}
inline std::span<const double> Tensor::grads() const {
  const auto& n = tape->node(id);
  if (!n.g) return {};
  return {n.g, static_cast<std::size_t>(n.rows) * n.cols};
}

namespace detail {

inline std::string shape_str(const Tensor& t) { return std::to_string(t.rows()) + "x" + std::to_string(t.cols()); }

inline void require(bool ok, const char* op, const Tensor& a, const Tensor& b) {
  if (!ok) throw Error(ErrorCode::ShapeMismatch, std::string(op) + ": " + shape_str(a) + " vs " + shape_str(b));
}

inline void check_finite(const Tape::Node& n, const char* op) {
#ifndef NDEBUG
  for (int i = 0; i < n.rows * n.cols; ++i)
    if (!std::isfinite(n.v[i])) throw Error(ErrorCode::NonFiniteLogits, std::string(op) + " produced a non-finite value");
#else
  (void)n;
  (void)op;
#endif
}

inline void softmax_row(const double* x, double* y, int n) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double z = 0.0;
  for (int i = 0; i < n; ++i) {
    y[i] = std::exp(x[i] - mx);
    z += y[i];
  }
  for (int i = 0; i < n; ++i) y[i] /= z;
}

inline double logsumexp_row(const double* x, int n) {
  double mx = x[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, x[i]);
  double z = 0.0;
  for (int i = 0; i < n; ++i) z += std::exp(x[i] - mx);
  return mx + std::log(z);
}

}  // namespace detail

// Y = X W^T + b, X: r x in, W: out x in, b: 1 x out.
namespace detail {
// Four independent partial sums so the loop vectorizes; the summation order
// is fixed, so results stay bit-reproducible.
inline double dot(const double* a, const double* b, int n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  int k = 0;
  for (; k + 4 <= n; k += 4) {
    s0 += a[k] * b[k];
    s1 += a[k + 1] * b[k + 1];
    s2 += a[k + 2] * b[k + 2];
    s3 += a[k + 3] * b[k + 3];
  }
  for (; k < n; ++k) s0 += a[k] * b[k];
  return (s0 + s2) + (s1 + s3);
}
}  // namespace detail

inline Tensor affine(Tensor x, Tensor w, Tensor b) {
  detail::require(x.cols() == w.cols(), "affine", x, w);
  detail::require(b.rows() == 1 && b.cols() == w.rows(), "affine bias", w, b);
  Tape& t = *x.tape;
  const int r = x.rows(), in = x.cols(), out = w.rows();
  Tensor y = t.make(Op::affine, r, out, {x.id, w.id, b.id});
  const double* X = t.node(x.id).v;
  const double* W = t.node(w.id).v;
  const double* B = t.node(b.id).v;
  double* Y = t.mut(y.id).v;
  for (int i = 0; i < r; ++i) {
    const double* xi = X + static_cast<std::size_t>(i) * in;
    for (int o = 0; o < out; ++o) {
      const double* wo = W + static_cast<std::size_t>(o) * in;
      Y[static_cast<std::size_t>(i) * out + o] = B[o] + detail::dot(xi, wo, in);
    }
  }
  detail::check_finite(t.node(y.id), "affine");
  return y;
}

// C = A B, A: r x k, B: k x c.
inline Tensor matmul(Tensor a, Tensor b) {
  detail::require(a.cols() == b.rows(), "matmul", a, b);
  Tape& t = *a.tape;
  const int r = a.rows(), k = a.cols(), c = b.cols();
  Tensor y = t.make(Op::matmul, r, c, {a.id, b.id});
  const double* A = t.node(a.id).v;
  const double* B = t.node(b.id).v;
  double* Y = t.mut(y.id).v;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < k; ++j) {
      const double aij = A[static_cast<std::size_t>(i) * k + j];
      if (aij == 0.0) continue;
      const double* bj = B + static_cast<std::size_t>(j) * c;
      double* yi = Y + static_cast<std::size_t>(i) * c;
      for (int l = 0; l < c; ++l) yi[l] += aij * bj[l];
    }
  return y;
}

// C = A B^T, A: r x k, B: c x k.
inline Tensor matmul_bt(Tensor a, Tensor b) {
  detail::require(a.cols() == b.cols(), "matmul_bt", a, b);
  Tape& t = *a.tape;
  const int r = a.rows(), k = a.cols(), c = b.rows();
  Tensor y = t.make(Op::matmul_bt, r, c, {a.id, b.id});
  const double* A = t.node(a.id).v;
  const double* B = t.node(b.id).v;
  double* Y = t.mut(y.id).v;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) {
      double s = 0.0;
      for (int l = 0; l < k; ++l) s += A[static_cast<std::size_t>(i) * k + l] * B[static_cast<std::size_t>(j) * k + l];
      Y[static_cast<std::size_t>(i) * c + j] = s;
    }
  return y;
}

inline Tensor tanh(Tensor x) {
  Tape& t = *x.tape;
  Tensor y = t.make(Op::tanh, x.rows(), x.cols(), {x.id});
  const double* X = t.node(x.id).v;
  double* Y = t.mut(y.id).v;
  for (std::size_t i = 0; i < x.size(); ++i) Y[i] = std::tanh(X[i]);
  return y;
}

inline Tensor relu(Tensor x) {
  Tape& t = *x.tape;
  Tensor y = t.make(Op::relu, x.rows(), x.cols(), {x.id});
  const double* X = t.node(x.id).v;
  double* Y = t.mut(y.id).v;
  for (std::size_t i = 0; i < x.size(); ++i) Y[i] = X[i] > 0.0 ? X[i] : 0.0;
  return y;
}

namespace detail {
template <typename F>
Tensor elementwise(Op op, Tensor a, Tensor b, F f, const char* what) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), what, a, b);
  Tape& t = *a.tape;
  Tensor y = t.make(op, a.rows(), a.cols(), {a.id, b.id});
  const double* A = t.node(a.id).v;
  const double* B = t.node(b.id).v;
  double* Y = t.mut(y.id).v;
  for (std::size_t i = 0; i < a.size(); ++i) Y[i] = f(A[i], B[i]);
  return y;
}
}  // namespace detail

inline Tensor add(Tensor a, Tensor b) {
  return detail::elementwise(Op::add, a, b, [](double x, double y) { return x + y; }, "add");
}
inline Tensor sub(Tensor a, Tensor b) {
  return detail::elementwise(Op::sub, a, b, [](double x, double y) { return x - y; }, "sub");
}
inline Tensor mul(Tensor a, Tensor b) {
  return detail::elementwise(Op::mul, a, b, [](double x, double y) { return x * y; }, "mul");
}

inline Tensor scale(Tensor x, double s) {
  Tape& t = *x.tape;
  Tensor y = t.make(Op::scale, x.rows(), x.cols(), {x.id});
  t.mut(y.id).scalar = s;
  const double* X = t.node(x.id).v;
  double* Y = t.mut(y.id).v;
  for (std::size_t i = 0; i < x.size(); ++i) Y[i] = s * X[i];
  return y;
}

// sum_i coeffs[i] * terms[i], all terms of one shape.
inline Tensor combine(std::span<const Tensor> terms, std::span<const double> coeffs) {
  if (terms.empty() || terms.size() != coeffs.size())
    throw Error(ErrorCode::ShapeMismatch, "combine: " + std::to_string(terms.size()) + " terms, " +
                                              std::to_string(coeffs.size()) + " coefficients");
  for (const auto& x : terms) detail::require(x.rows() == terms[0].rows() && x.cols() == terms[0].cols(), "combine", terms[0], x);
  Tape& t = *terms[0].tape;
  Tensor y = t.make_list(Op::combine, terms[0].rows(), terms[0].cols(), terms, coeffs);
  double* Y = t.mut(y.id).v;
  for (std::size_t k = 0; k < terms.size(); ++k) {
    const double* X = t.node(terms[k].id).v;
    for (std::size_t i = 0; i < y.size(); ++i) Y[i] += coeffs[k] * X[i];
  }
  return y;
}

inline Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw Error(ErrorCode::ShapeMismatch, "concat_cols: no inputs");
  int cols = 0;
  for (const auto& p : parts) {
    detail::require(p.rows() == parts[0].rows(), "concat_cols", parts[0], p);
    cols += p.cols();
  }
  Tape& t = *parts[0].tape;
  const int rows = parts[0].rows();
  Tensor y = t.make_list(Op::concat_cols, rows, cols, parts);
  double* Y = t.mut(y.id).v;
  int offset = 0;
  for (const auto& p : parts) {
    const double* X = t.node(p.id).v;
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < p.cols(); ++c) Y[static_cast<std::size_t>(r) * cols + offset + c] = X[static_cast<std::size_t>(r) * p.cols() + c];
    offset += p.cols();
  }
  return y;
}

inline Tensor concat_cols(std::initializer_list<Tensor> parts) {
  return concat_cols(std::span<const Tensor>(parts.begin(), parts.size()));
}

inline Tensor reshape(Tensor x, int rows, int cols) {
  if (static_cast<std::size_t>(rows) * cols != x.size())
    throw Error(ErrorCode::ShapeMismatch, "reshape " + detail::shape_str(x) + " to " + std::to_string(rows) + "x" + std::to_string(cols));
  Tape& t = *x.tape;
  Tensor y = t.make(Op::reshape, rows, cols, {x.id});
  std::copy(x.values().begin(), x.values().end(), t.mut(y.id).v);
  return y;
}

// Sub-block rows [r0, r0 + nr) x cols [c0, c0 + nc).
inline Tensor slice(Tensor x, int r0, int nr, int c0, int nc) {
  if (r0 < 0 || c0 < 0 || nr <= 0 || nc <= 0 || r0 + nr > x.rows() || c0 + nc > x.cols())
    throw Error(ErrorCode::ShapeMismatch, "slice out of range of " + detail::shape_str(x));
  Tape& t = *x.tape;
  Tensor y = t.make(Op::slice, nr, nc, {x.id});
  auto& n = t.mut(y.id);
  n.i0 = r0;
  n.i1 = c0;
  const double* X = t.node(x.id).v;
  for (int r = 0; r < nr; ++r)
    for (int c = 0; c < nc; ++c) n.v[static_cast<std::size_t>(r) * nc + c] = X[static_cast<std::size_t>(r0 + r) * x.cols() + c0 + c];
  return y;
}

inline Tensor row(Tensor x, int r) { return slice(x, r, 1, 0, x.cols()); }

// Row-wise softmax.
inline Tensor softmax(Tensor x) {
  Tape& t = *x.tape;
  Tensor y = t.make(Op::softmax, x.rows(), x.cols(), {x.id});
  const double* X = t.node(x.id).v;
  double* Y = t.mut(y.id).v;
  for (int r = 0; r < x.rows(); ++r) detail::softmax_row(X + static_cast<std::size_t>(r) * x.cols(), Y + static_cast<std::size_t>(r) * x.cols(), x.cols());
  return y;
}

inline Tensor log_softmax(Tensor x) {
  Tape& t = *x.tape;
  Tensor y = t.make(Op::log_softmax, x.rows(), x.cols(), {x.id});
  const double* X = t.node(x.id).v;
  double* Y = t.mut(y.id).v;
  const int c = x.cols();
  for (int r = 0; r < x.rows(); ++r) {
    const double* xr = X + static_cast<std::size_t>(r) * c;
    const double lse = detail::logsumexp_row(xr, c);
    for (int i = 0; i < c; ++i) Y[static_cast<std::size_t>(r) * c + i] = xr[i] - lse;
  }
  return y;
}

inline Tensor pick(Tensor x, int r, int c) { return slice(x, r, 1, c, 1); }

inline Tensor sum(Tensor x) {
  Tape& t = *x.tape;
  Tensor y = t.make(Op::sum, 1, 1, {x.id});
  double s = 0.0;
  for (double v : x.values()) s += v;
  t.mut(y.id).v[0] = s;
  return y;
}

enum class SampleMode : uint8_t { sample, argmax };

inline int argmax(std::span<const double> v) {
  int best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = static_cast<int>(i);
  return best;
}

// Forward: exact one-hot of a categorical draw (or argmax, lowest index on
// ties). Backward: gradient of softmax(logits), i.e. onehot + p - stop(p).
inline Tensor categorical_straight_through(Tensor logits, Rng& rng, SampleMode mode) {
  if (logits.rows() != 1) throw Error(ErrorCode::ShapeMismatch, "categorical_straight_through expects 1 x d logits");
  for (double v : logits.values())
    if (!std::isfinite(v)) throw Error(ErrorCode::NonFiniteLogits, "categorical_straight_through");
  Tape& t = *logits.tape;
  const int d = logits.cols();
  Tensor y = t.make(Op::straight_through, 1, d, {logits.id});
  auto& n = t.mut(y.id);
  n.aux = t.alloc(static_cast<std::size_t>(d));
  detail::softmax_row(t.node(logits.id).v, n.aux, d);
  const int idx = mode == SampleMode::argmax ? argmax(logits.values()) : rng.categorical(std::span<const double>(n.aux, d));
  n.i0 = idx;
  n.v[idx] = 1.0;
  return y;
}

inline int one_hot_index(Tensor t) { return argmax(t.values()); }

// -log softmax(logits)[label], logits 1 x K.
inline Tensor cross_entropy(Tensor logits, int label) {
  if (logits.rows() != 1 || label < 0 || label >= logits.cols())
    throw Error(ErrorCode::ShapeMismatch, "cross_entropy label " + std::to_string(label) + " for " + detail::shape_str(logits));
  Tape& t = *logits.tape;
  const int k = logits.cols();
  Tensor y = t.make(Op::cross_entropy, 1, 1, {logits.id});
  auto& n = t.mut(y.id);
  n.i0 = label;
  n.aux = t.alloc(static_cast<std::size_t>(k));
  const double* X = t.node(logits.id).v;
  detail::softmax_row(X, n.aux, k);
  n.v[0] = detail::logsumexp_row(X, k) - X[label];
  return y;
}

inline void require_distribution(std::span<const double> p, const char* what) {
  double s = 0.0;
  for (double x : p) {
    if (!(x >= 0.0)) throw Error(ErrorCode::NonNormalizedDistribution, std::string(what) + ": negative or NaN entry");
    s += x;
  }
  if (std::abs(s - 1.0) > 1e-6)
    throw Error(ErrorCode::NonNormalizedDistribution, std::string(what) + ": sums to " + std::to_string(s));
}

// KL(p || q) for probability rows 1 x K; 0 log 0 = 0.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw Error(ErrorCode::ShapeMismatch, "kl_divergence: sizes differ");
  require_distribution(p, "kl_divergence p");
  require_distribution(q, "kl_divergence q");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) s += p[i] * (std::log(p[i]) - std::log(q[i]));
  return s;
}

inline Tensor kl_divergence(Tensor p, Tensor q) {
  detail::require(p.rows() == 1 && q.rows() == 1 && p.cols() == q.cols(), "kl_divergence", p, q);
  const double v = kl_divergence(p.values(), q.values());
  Tape& t = *p.tape;
  Tensor y = t.make(Op::kl, 1, 1, {p.id, q.id});
  t.mut(y.id).v[0] = v;
  return y;
}

inline std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  detail::softmax_row(logits.data(), out.data(), static_cast<int>(logits.size()));
  return out;
}

inline void Tape::backprop(int id) {
  const Node& n = nodes_[id];
  const double* G = n.g;
  const std::size_t size = static_cast<std::size_t>(n.rows) * n.cols;
  auto grad_of = [&](int p) -> double* { return p >= 0 && nodes_[p].needs_grad ? nodes_[p].g : nullptr; };

  switch (n.op) {
    case Op::leaf:
      break;
    case Op::affine: {
      const Node& x = nodes_[n.a];
      const Node& w = nodes_[n.b];
      const int r = x.rows, in = x.cols, out = w.rows;
      if (double* gx = grad_of(n.a))
        for (int i = 0; i < r; ++i)
          for (int o = 0; o < out; ++o) {
            const double go = G[static_cast<std::size_t>(i) * out + o];
            if (go == 0.0) continue;
            const double* wo = w.v + static_cast<std::size_t>(o) * in;
            double* gxi = gx + static_cast<std::size_t>(i) * in;
            for (int k = 0; k < in; ++k) gxi[k] += go * wo[k];
          }
      if (double* gw = grad_of(n.b))
        for (int i = 0; i < r; ++i)
          for (int o = 0; o < out; ++o) {
            const double go = G[static_cast<std::size_t>(i) * out + o];
            if (go == 0.0) continue;
            const double* xi = x.v + static_cast<std::size_t>(i) * in;
            double* gwo = gw + static_cast<std::size_t>(o) * in;
            for (int k = 0; k < in; ++k) gwo[k] += go * xi[k];
          }
      if (double* gb = grad_of(n.c))
        for (int i = 0; i < r; ++i)
          for (int o = 0; o < out; ++o) gb[o] += G[static_cast<std::size_t>(i) * out + o];
      break;
    }
    case Op::matmul: {
      const Node& A = nodes_[n.a];
      const Node& B = nodes_[n.b];
      const int r = A.rows, k = A.cols, c = B.cols;
      if (double* ga = grad_of(n.a))
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < k; ++j) {
            double s = 0.0;
            for (int l = 0; l < c; ++l) s += G[static_cast<std::size_t>(i) * c + l] * B.v[static_cast<std::size_t>(j) * c + l];
            ga[static_cast<std::size_t>(i) * k + j] += s;
          }
      if (double* gb = grad_of(n.b))
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < k; ++j) {
            const double aij = A.v[static_cast<std::size_t>(i) * k + j];
            for (int l = 0; l < c; ++l) gb[static_cast<std::size_t>(j) * c + l] += aij * G[static_cast<std::size_t>(i) * c + l];
          }
      break;
    }
    case Op::matmul_bt: {
      const Node& A = nodes_[n.a];
      const Node& B = nodes_[n.b];
      const int r = A.rows, k = A.cols, c = B.rows;
      double* ga = grad_of(n.a);
      double* gb = grad_of(n.b);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) {
          const double gij = G[static_cast<std::size_t>(i) * c + j];
          if (gij == 0.0) continue;
          if (ga)
            for (int l = 0; l < k; ++l) ga[static_cast<std::size_t>(i) * k + l] += gij * B.v[static_cast<std::size_t>(j) * k + l];
          if (gb)
            for (int l = 0; l < k; ++l) gb[static_cast<std::size_t>(j) * k + l] += gij * A.v[static_cast<std::size_t>(i) * k + l];
        }
      break;
    }
    case Op::tanh:
      if (double* gx = grad_of(n.a))
        for (std::size_t i = 0; i < size; ++i) gx[i] += G[i] * (1.0 - n.v[i] * n.v[i]);
      break;
    case Op::relu:
      if (double* gx = grad_of(n.a))
        for (std::size_t i = 0; i < size; ++i)
          if (n.v[i] > 0.0) gx[i] += G[i];
      break;
    case Op::add:
    case Op::sub: {
      const double sign = n.op == Op::sub ? -1.0 : 1.0;
      if (double* ga = grad_of(n.a))
        for (std::size_t i = 0; i < size; ++i) ga[i] += G[i];
      if (double* gb = grad_of(n.b))
        for (std::size_t i = 0; i < size; ++i) gb[i] += sign * G[i];
      break;
    }
    case Op::mul: {
      const double* A = nodes_[n.a].v;
      const double* B = nodes_[n.b].v;
      if (double* ga = grad_of(n.a))
        for (std::size_t i = 0; i < size; ++i) ga[i] += G[i] * B[i];
      if (double* gb = grad_of(n.b))
        for (std::size_t i = 0; i < size; ++i) gb[i] += G[i] * A[i];
      break;
    }
    case Op::scale:
      if (double* gx = grad_of(n.a))
        for (std::size_t i = 0; i < size; ++i) gx[i] += n.scalar * G[i];
      break;
    case Op::combine:
      for (int k = 0; k < n.extra_count; ++k)
        if (double* gx = grad_of(extras_[n.extra_begin + k])) {
          const double ck = coeffs_[n.i0 + k];
          for (std::size_t i = 0; i < size; ++i) gx[i] += ck * G[i];
        }
      break;
    case Op::concat_cols: {
      int offset = 0;
      for (int k = 0; k < n.extra_count; ++k) {
        const int p = extras_[n.extra_begin + k];
        const int pc = nodes_[p].cols;
        if (double* gx = grad_of(p))
          for (int r = 0; r < n.rows; ++r)
            for (int c = 0; c < pc; ++c) gx[static_cast<std::size_t>(r) * pc + c] += G[static_cast<std::size_t>(r) * n.cols + offset + c];
        offset += pc;
      }
      break;
    }
    case Op::reshape:
      if (double* gx = grad_of(n.a))
        for (std::size_t i = 0; i < size; ++i) gx[i] += G[i];
      break;
    case Op::slice:
      if (double* gx = grad_of(n.a)) {
        const int pc = nodes_[n.a].cols;
        for (int r = 0; r < n.rows; ++r)
          for (int c = 0; c < n.cols; ++c)
            gx[static_cast<std::size_t>(n.i0 + r) * pc + n.i1 + c] += G[static_cast<std::size_t>(r) * n.cols + c];
      }
      break;
    case Op::softmax:
      if (double* gx = grad_of(n.a))
        for (int r = 0; r < n.rows; ++r) {
          const double* y = n.v + static_cast<std::size_t>(r) * n.cols;
          const double* g = G + static_cast<std::size_t>(r) * n.cols;
          double dot = 0.0;
          for (int i = 0; i < n.cols; ++i) dot += g[i] * y[i];
          for (int i = 0; i < n.cols; ++i) gx[static_cast<std::size_t>(r) * n.cols + i] += y[i] * (g[i] - dot);
        }
      break;
    case Op::log_softmax:
      if (double* gx = grad_of(n.a))
        for (int r = 0; r < n.rows; ++r) {
          const double* y = n.v + static_cast<std::size_t>(r) * n.cols;
          const double* g = G + static_cast<std::size_t>(r) * n.cols;
          double total = 0.0;
          for (int i = 0; i < n.cols; ++i) total += g[i];
          for (int i = 0; i < n.cols; ++i) gx[static_cast<std::size_t>(r) * n.cols + i] += g[i] - std::exp(y[i]) * total;
        }
      break;
    case Op::sum:
      if (double* gx = grad_of(n.a)) {
        const std::size_t m = static_cast<std::size_t>(nodes_[n.a].rows) * nodes_[n.a].cols;
        for (std::size_t i = 0; i < m; ++i) gx[i] += G[0];
      }
      break;
    case Op::straight_through:
      if (double* gx = grad_of(n.a)) {
        const double* p = n.aux;
        double dot = 0.0;
        for (int i = 0; i < n.cols; ++i) dot += G[i] * p[i];
        for (int i = 0; i < n.cols; ++i) gx[i] += p[i] * (G[i] - dot);
      }
      break;
    case Op::cross_entropy:
      if (double* gx = grad_of(n.a)) {
        const int k = nodes_[n.a].cols;
        for (int i = 0; i < k; ++i) gx[i] += G[0] * (n.aux[i] - (i == n.i0 ? 1.0 : 0.0));
      }
      break;
    case Op::kl: {
      const double* p = nodes_[n.a].v;
      const double* q = nodes_[n.b].v;
      const int k = n.a >= 0 ? nodes_[n.a].cols : 0;
      if (double* gp = grad_of(n.a))
        for (int i = 0; i < k; ++i)
          if (p[i] > 0.0) gp[i] += G[0] * (std::log(p[i]) - std::log(q[i]) + 1.0);
      if (double* gq = grad_of(n.b))
        for (int i = 0; i < k; ++i) gq[i] -= G[0] * p[i] / q[i];
      break;
    }
  }
}

}  // namespace emcomm::diff
