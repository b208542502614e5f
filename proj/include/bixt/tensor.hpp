#pragma once

// Dense row-major tensors templated on scalar, plus reverse-mode autodiff on an
// explicit tape. Ops are free functions; matmul inner loops go through Eigen,
// everything else is straightforward loops so accumulation order is fixed and
// results are bitwise reproducible on a given platform.
//
// Autodiff model: a Tape records every primitive executed while its Scope is
// active and at least one input participates in differentiation. The record
// order is execution order, which is a valid topological order, and backward
// walks it exactly once in reverse. Gradients accumulate in tape-local buffers;
// leaf gradients are mirrored into Tensor::grad() so callers can read them.
// One tape and its tensors belong to one logical execution context; parallel
// contexts each get their own tape.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include "bixt/random.hpp"

namespace bixt {

// ---------------------------------------------------------------------------
// Errors

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};
struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};
struct IoError : std::runtime_error {
  explicit IoError(const std::string& m) : std::runtime_error(m) {}
};

using Shape = std::vector<int64_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

// Logits at masked positions get this value before softmax. Finite on purpose:
// exp(kMaskedLogit - rowmax) underflows to exactly 0 while max-subtraction
// stays NaN-free. Representable in both float and double.
constexpr double kMaskedLogit = -1e30;

// Finite checks after each primitive. On by default; the toggle exists for
// profiling runs only.
inline bool& finite_checks() {
  static bool on = true;
  return on;
}

template <class S>
void check_finite(const char* op, const std::vector<S>& v) {
  if (!finite_checks()) return;
  for (const S& x : v) {
    if (!std::isfinite(x))
      throw NumericError(std::string(op) + ": non-finite value in output");
  }
}

// ---------------------------------------------------------------------------
// Matmul shape counter, used by instrumentation tests to pin down how many
// similarity products a forward pass issues.

class OpCounter {
 public:
  struct MatmulKey {
    int64_t rows, cols, inner;
    bool operator==(const MatmulKey& o) const {
      return rows == o.rows && cols == o.cols && inner == o.inner;
    }
  };
  struct KeyHash {
    size_t operator()(const MatmulKey& k) const {
      uint64_t h = 0x9e3779b97f4a7c15ull;
      for (int64_t v : {k.rows, k.cols, k.inner}) {
        h ^= uint64_t(v) + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
      }
      return size_t(h);
    }
  };

  static OpCounter*& active() {
    thread_local OpCounter* cur = nullptr;
    return cur;
  }

  struct Scope {
    explicit Scope(OpCounter& c) : prev_(active()) { active() = &c; }
    ~Scope() { active() = prev_;
    }
    OpCounter* prev_;
  };

  void add_matmul(int64_t rows, int64_t cols, int64_t inner, int64_t slices) {
    matmuls_[{rows, cols, inner}] += slices;
    calls_ += 1;
  }

  // Total matrix slices of the given output shape, any inner dim.
  int64_t slices(int64_t rows, int64_t cols) const {
    int64_t n = 0;
    for (const auto& [k, v] : matmuls_)
      if (k.rows == rows && k.cols == cols) n += v;
    return n;
  }

  int64_t calls() const { return calls_; }

  // Total multiply-accumulates across every recorded matmul.
  int64_t macs() const {
    int64_t n = 0;
    for (const auto& [k, v] : matmuls_) n += k.rows * k.cols * k.inner * v;
    return n;
  }

  void reset() {
    matmuls_.clear();
    calls_ = 0;
  }

 private:
  std::unordered_map<MatmulKey, int64_t, KeyHash> matmuls_;
  int64_t calls_ = 0;
};

// ---------------------------------------------------------------------------
// Tensor

template <class S>
struct TensorData {
  Shape shape;
  std::vector<S> v;
  std::vector<S> grad;  // same size as v once touched by backward
  bool requires_grad = false;
  std::string name;
};

template <class S>
class Tape;

template <class S>
class Tensor {
 public:
  Tensor() : d_(std::make_shared<TensorData<S>>()) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.d_->shape = std::move(shape);
    t.d_->v.assign(size_t(numel(t.d_->shape)), S(0));
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, S value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.d_->v.begin(), t.d_->v.end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<S> values,
                     bool requires_grad = false) {
    if (int64_t(values.size()) != numel(shape))
      throw ShapeError("Tensor::from: " + shape_str(shape) + " needs " +
                       std::to_string(numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    Tensor t;
    t.d_->shape = std::move(shape);
    t.d_->v = std::move(values);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(S value) { return from({1}, {value}); }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (S& x : t.d_->v) x = S(rng.normal() * stddev);
    return t;
  }

  static Tensor trunc_normal(Shape shape, Rng& rng, double stddev,
                             bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (S& x : t.d_->v) x = S(rng.trunc_normal(stddev));
    return t;
  }

  const Shape& shape() const { return d_->shape; }
  int64_t rank() const { return int64_t(d_->shape.size()); }
  int64_t dim(int64_t i) const {
    if (i < 0) i += rank();
    return d_->shape[size_t(i)];
  }
  int64_t size() const { return int64_t(d_->v.size()); }

  S* data() { return d_->v.data(); }
  const S* data() const { return d_->v.data(); }
  std::vector<S>& values() { return d_->v; }
  const std::vector<S>& values() const { return d_->v; }

  S item() const {
    if (size() != 1)
      throw ShapeError("item: tensor has " + std::to_string(size()) +
                       " elements");
    return d_->v[0];
  }

  S at(std::initializer_list<int64_t> idx) const {
    if (int64_t(idx.size()) != rank()) throw ShapeError("at: rank mismatch");
    int64_t off = 0, i = 0;
    for (int64_t ix : idx) {
      off = off * d_->shape[size_t(i)] + ix;
      ++i;
    }
    return d_->v[size_t(off)];
  }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool rg) { d_->requires_grad = rg; }

  const std::string& name() const { return d_->name; }
  Tensor& set_name(std::string n) {
    d_->name = std::move(n);
    return *this;
  }

  // Leaf gradient, populated by Tape::backward. Empty until then.
  const std::vector<S>& grad() const { return d_->grad; }
  std::vector<S>& grad() { return d_->grad; }
  void zero_grad() { d_->grad.assign(d_->v.size(), S(0)); }

  const std::shared_ptr<TensorData<S>>& ptr() const { return d_; }

 private:
  std::shared_ptr<TensorData<S>> d_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

// ---------------------------------------------------------------------------
// Tape

template <class S>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape*& active() {
    thread_local Tape* cur = nullptr;
    return cur;
  }

  struct Scope {
    explicit Scope(Tape& t) : prev_(active()) { active() = &t; }
    ~Scope() { active() = prev_; }
    Tape* prev_;
  };

  // Record one executed primitive. `vjp` reads the output gradient via
  // grad_of(out) and accumulates into grad_buffer(input) for each input that
  // requires grad. Public so tests and extensions can add primitives.
  void record(const Tensor<S>& out, std::function<void(Tape&)> vjp) {
    produced_.insert(out.ptr().get());
    nodes_.push_back(Node{out.ptr(), std::move(vjp)});
  }

  bool recorded(const Tensor<S>& t) const {
    return produced_.count(t.ptr().get()) != 0;
  }

  size_t ops() const { return nodes_.size(); }

  // Gradient buffer for `d`, created zero-filled on first use.
  std::vector<S>& grad_buffer(const std::shared_ptr<TensorData<S>>& d) {
    auto it = grads_.find(d.get());
    if (it == grads_.end()) {
      holders_.emplace(d.get(), d);
      it = grads_.emplace(d.get(), std::vector<S>(d->v.size(), S(0))).first;
    }
    return it->second;
  }

  // Null if nothing flowed into `d`.
  const std::vector<S>* grad_of(const TensorData<S>* d) const {
    auto it = grads_.find(d);
    return it == grads_.end() ? nullptr : &it->second;
  }
  const std::vector<S>* grad_of(const Tensor<S>& t) const {
    return grad_of(t.ptr().get());
  }

  // Reverse pass from a scalar root. Each recorded op is visited exactly once,
  // newest first. With `write_leaf_grads` the gradients of leaves (tensors not
  // produced on this tape) are added into Tensor::grad().
  void backward(const Tensor<S>& root, bool write_leaf_grads = true) {
    if (root.size() != 1)
      throw ShapeError("backward: root must be scalar, got " +
                       shape_str(root.shape()));
    if (!recorded(root))
      throw ShapeError("backward: root was not produced on this tape");
    grads_.clear();
    grad_buffer(root.ptr())[0] = S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (grads_.find(it->out.get()) == grads_.end()) continue;  // no flow
      it->vjp(*this);
    }
    if (write_leaf_grads) {
      for (auto& [ptr, g] : grads_) {
        if (!ptr->requires_grad || produced_.count(ptr)) continue;
        auto h = holders_.find(ptr);
        TensorData<S>* td = h->second.get();
        if (td->grad.size() != td->v.size()) td->grad.assign(td->v.size(), S(0));
        for (size_t i = 0; i < g.size(); ++i) td->grad[i] += g[i];
      }
    }
  }

 private:
  struct Node {
    std::shared_ptr<TensorData<S>> out;
    std::function<void(Tape&)> vjp;
  };

  std::vector<Node> nodes_;
  std::unordered_set<const TensorData<S>*> produced_;
  std::unordered_map<const TensorData<S>*, std::vector<S>> grads_;
  std::unordered_map<const TensorData<S>*, std::shared_ptr<TensorData<S>>>
      holders_;
};

// True when the op should be recorded: a tape is active and some input is part
// of the differentiable graph.
template <class S>
bool tracing(std::initializer_list<const Tensor<S>*> inputs) {
  Tape<S>* t = Tape<S>::active();
  if (!t) return false;
  for (const Tensor<S>* in : inputs) {
    if (in->requires_grad() || t->recorded(*in)) return true;
  }
  return false;
}

template <class S>
Tensor<S> make_traced(Tensor<S> out) {
  out.set_requires_grad(true);
  return out;
}

// ---------------------------------------------------------------------------
// Matmul

namespace detail {

template <class S>
using EMat =
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using EMap = Eigen::Map<EMat<S>>;
template <class S>
using ECMap = Eigen::Map<const EMat<S>>;

// Broadcast two leading-dim lists (right aligned, extent 1 or missing
// broadcasts). Returns the broadcast shape.
inline Shape broadcast_leading(const Shape& a, const Shape& b,
                               const char* op) {
  Shape out(std::max(a.size(), b.size()));
  for (size_t i = 0; i < out.size(); ++i) {
    int64_t da = i < out.size() - a.size() ? 1 : a[i - (out.size() - a.size())];
    int64_t db = i < out.size() - b.size() ? 1 : b[i - (out.size() - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(op) + ": batch dims " + shape_str(a) +
                       " vs " + shape_str(b) + " do not broadcast");
    out[i] = std::max(da, db);
  }
  return out;
}

// Offset of batch slice `idx` (coords over `out_lead`) within a tensor whose
// leading dims are `lead`, in units of matrix slices.
inline int64_t slice_index(int64_t flat, const Shape& out_lead,
                           const Shape& lead) {
  int64_t off = 0;
  // Decompose flat index into coords, then fold only the dims `lead` has.
  int64_t rem = flat;
  std::vector<int64_t> coord(out_lead.size());
  for (int64_t i = int64_t(out_lead.size()) - 1; i >= 0; --i) {
    coord[size_t(i)] = rem % out_lead[size_t(i)];
    rem /= out_lead[size_t(i)];
  }
  size_t shift = out_lead.size() - lead.size();
  for (size_t i = 0; i < lead.size(); ++i) {
    int64_t c = lead[i] == 1 ? 0 : coord[i + shift];
    off = off * lead[i] + c;
  }
  return off;
}

}  // namespace detail

// Batched matrix product. Trailing two dims are the matrices; leading dims
// broadcast (missing or extent-1). A rank-2 rhs is the common projection case
// and collapses to a single product.
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul: inputs must have rank >= 2, got " +
                     shape_str(a.shape()) + " @ " + shape_str(b.shape()));
  const int64_t I = a.dim(-2), K = a.dim(-1);
  const int64_t Kb = b.dim(-2), J = b.dim(-1);
  if (K != Kb)
    throw ShapeError("matmul: inner dims differ, " + shape_str(a.shape()) +
                     " @ " + shape_str(b.shape()));

  Shape lead_a(a.shape().begin(), a.shape().end() - 2);
  Shape lead_b(b.shape().begin(), b.shape().end() - 2);
  Shape lead = detail::broadcast_leading(lead_a, lead_b, "matmul");
  const int64_t slices = numel(lead);

  Shape out_shape = lead;
  out_shape.push_back(I);
  out_shape.push_back(J);
  Tensor<S> out = Tensor<S>::zeros(out_shape);

  const bool flat_rhs = b.rank() == 2;
  if (flat_rhs) {
    // [*, I, K] @ [K, J] as one product over the flattened rows.
    const int64_t R = slices * I;
    detail::ECMap<S> A(a.data(), R, K);
    detail::ECMap<S> B(b.data(), K, J);
    detail::EMap<S> C(out.data(), R, J);
    C.noalias() = A * B;
  } else {
    for (int64_t s = 0; s < slices; ++s) {
      const int64_t sa = detail::slice_index(s, lead, lead_a);
      const int64_t sb = detail::slice_index(s, lead, lead_b);
      detail::ECMap<S> A(a.data() + sa * I * K, I, K);
      detail::ECMap<S> B(b.data() + sb * K * J, K, J);
      detail::EMap<S> C(out.data() + s * I * J, I, J);
      C.noalias() = A * B;
    }
  }
  if (OpCounter* c = OpCounter::active()) c->add_matmul(I, J, K, slices);
  check_finite("matmul", out.values());

  if (tracing<S>({&a, &b})) {
    out = make_traced(std::move(out));
    auto ad = a.ptr();
    auto bd = b.ptr();
    auto od = out.ptr();
    Tape<S>::active()->record(out, [=](Tape<S>& tp) {
      const std::vector<S>* og = tp.grad_of(od.get());
      if (!og) return;
      const S* gp = og->data();
      if (flat_rhs) {
        const int64_t R = slices * I;
        detail::ECMap<S> G(gp, R, J);
        detail::ECMap<S> A(ad->v.data(), R, K);
        detail::ECMap<S> B(bd->v.data(), K, J);
        if (ad->requires_grad || tp.grad_of(ad.get())) {
          detail::EMap<S> dA(tp.grad_buffer(ad).data(), R, K);
          dA.noalias() += G * B.transpose();
        }
        if (bd->requires_grad || tp.grad_of(bd.get())) {
          detail::EMap<S> dB(tp.grad_buffer(bd).data(), K, J);
          dB.noalias() += A.transpose() * G;
        }
      } else {
        std::vector<S>& dA = tp.grad_buffer(ad);
        std::vector<S>& dB = tp.grad_buffer(bd);
        for (int64_t s = 0; s < slices; ++s) {
          const int64_t sa = detail::slice_index(s, lead, lead_a);
          const int64_t sb = detail::slice_index(s, lead, lead_b);
          detail::ECMap<S> G(gp + s * I * J, I, J);
          detail::ECMap<S> A(ad->v.data() + sa * I * K, I, K);
          detail::ECMap<S> B(bd->v.data() + sb * K * J, K, J);
          detail::EMap<S> dAs(dA.data() + sa * I * K, I, K);
          detail::EMap<S> dBs(dB.data() + sb * K * J, K, J);
          dAs.noalias() += G * B.transpose();
          dBs.noalias() += A.transpose() * G;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Layout ops (materialized copies, no strided views)

template <class S>
Tensor<S> permute(const Tensor<S>& x, const std::vector<int64_t>& perm) {
  if (int64_t(perm.size()) != x.rank())
    throw ShapeError("permute: perm rank mismatch");
  const Shape& in = x.shape();
  Shape out_shape(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) out_shape[i] = in[size_t(perm[i])];
  Tensor<S> out = Tensor<S>::zeros(out_shape);

  const int64_t r = x.rank();
  std::vector<int64_t> in_strides(size_t(r), 1);
  for (int64_t i = r - 2; i >= 0; --i)
    in_strides[size_t(i)] = in_strides[size_t(i + 1)] * in[size_t(i + 1)];
  std::vector<int64_t> src_stride(static_cast<size_t>(r));
  for (int64_t i = 0; i < r; ++i)
    src_stride[size_t(i)] = in_strides[size_t(perm[size_t(i)])];

  const int64_t n = x.size();
  std::vector<int64_t> coord(size_t(r), 0);
  const S* src = x.data();
  S* dst = out.data();
  for (int64_t o = 0; o < n; ++o) {
    int64_t off = 0;
    for (int64_t i = 0; i < r; ++i) off += coord[size_t(i)] * src_stride[size_t(i)];
    dst[o] = src[off];
    for (int64_t i = r - 1; i >= 0; --i) {
      if (++coord[size_t(i)] < out_shape[size_t(i)]) break;
      coord[size_t(i)] = 0;
    }
  }

  if (tracing<S>({&x})) {
    out = make_traced(std::move(out));
    auto xd = x.ptr();
    auto od = out.ptr();
    std::vector<int64_t> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[size_t(perm[i])] = int64_t(i);
    Tape<S>::active()->record(out, [=](Tape<S>& tp) {
      const std::vector<S>* og = tp.grad_of(od.get());
      if (!og) return;
      std::vector<S>& dx = tp.grad_buffer(xd);
      // Walk the output in order and scatter through the permutation.
      std::vector<int64_t> c(out_shape.size(), 0);
      for (size_t o = 0; o < og->size(); ++o) {
        int64_t off = 0;
        for (size_t i = 0; i < c.size(); ++i) off += c[i] * src_stride[i];
        dx[size_t(off)] += (*og)[o];
        for (int64_t i = int64_t(c.size()) - 1; i >= 0; --i) {
          if (++c[size_t(i)] < out_shape[size_t(i)]) break;
          c[size_t(i)] = 0;
        }
      }
    });
  }
  return out;
}

// Swap the trailing two dims.
template <class S>
Tensor<S> transpose(const Tensor<S>& x) {
  if (x.rank() < 2) throw ShapeError("transpose: rank < 2");
  std::vector<int64_t> perm(static_cast<size_t>(x.rank()));
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = int64_t(i);
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(x, perm);
}

template <class S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  int64_t infer = -1;
  int64_t known = 1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one -1");
      infer = int64_t(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || x.size() % known != 0)
      throw ShapeError("reshape: cannot infer dim");
    shape[size_t(infer)] = x.size() / known;
  }
  if (numel(shape) != x.size())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " +
                     shape_str(shape) + " changes element count");
  Tensor<S> out = Tensor<S>::from(shape, x.values());
  if (tracing<S>({&x})) {
    out = make_traced(std::move(out));
    auto xd = x.ptr();
    auto od = out.ptr();
    Tape<S>::active()->record(out, [=](Tape<S>& tp) {
      const std::vector<S>* og = tp.grad_of(od.get());
      if (!og) return;
      std::vector<S>& dx = tp.grad_buffer(xd);
      for (size_t i = 0; i < og->size(); ++i) dx[i] += (*og)[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise ops. Binary ops take equal shapes or a rhs whose shape is a
// suffix of the lhs (leading-dim broadcast, the bias-add case).

namespace detail {

template <class S>
int64_t suffix_repeat(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (a.size() == 0 || b.size() == 0)
    throw ShapeError(std::string(op) + ": empty operand");
  if (sb.size() > sa.size())
    throw ShapeError(std::string(op) + ": rhs rank exceeds lhs, " +
                     shape_str(sa) + " vs " + shape_str(sb));
  size_t off = sa.size() - sb.size();
  for (size_t i = 0; i < sb.size(); ++i) {
    if (sa[off + i] != sb[i])
      throw ShapeError(std::string(op) + ": rhs " + shape_str(sb) +
                       " is not a suffix of " + shape_str(sa));
  }
  return b.size() == 0 ? 0 : a.size() / b.size();
}

}  // namespace detail

template <class S, class Fwd, class Bwd>
Tensor<S> binary_op(const char* name, const Tensor<S>& a, const Tensor<S>& b,
                    Fwd fwd, Bwd bwd) {
  detail::suffix_repeat(a, b, name);
  const int64_t nb = b.size();
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = fwd(pa[i], pb[i % nb]);
  check_finite(name, out.values());
  if (tracing<S>({&a, &b})) {
    out = make_traced(std::move(out));
    auto ad = a.ptr();
    auto bd = b.ptr();
    auto od = out.ptr();
    Tape<S>::active()->record(out, [=](Tape<S>& tp) {
      const std::vector<S>* og = tp.grad_of(od.get());
      if (!og) return;
      std::vector<S>& da = tp.grad_buffer(ad);
      std::vector<S>& db = tp.grad_buffer(bd);
      for (size_t i = 0; i < og->size(); ++i) {
        S ga, gb;
        bwd(ad->v[i], bd->v[i % size_t(nb)], (*og)[i], ga, gb);
        da[i] += ga;
        db[i % size_t(nb)] += gb;
      }
    });
  }
  return out;
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op(
      "add", a, b, [](S x, S y) { return x + y; },
      [](S, S, S g, S& ga, S& gb) {
        ga = g;
        gb = g;
      });
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op(
      "sub", a, b, [](S x, S y) { return x - y; },
      [](S, S, S g, S& ga, S& gb) {
        ga = g;
        gb = -g;
      });
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return binary_op(
      "mul", a, b, [](S x, S y) { return x * y; },
      [](S x, S y, S g, S& ga, S& gb) {
        ga = g * y;
        gb = g * x;
      });
}

template <class S>
Tensor<S> scale(const Tensor<S>& x, S c) {
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] * c;
  check_finite("scale", out.values());
  if (tracing<S>({&x})) {
    out = make_traced(std::move(out));
    auto xd = x.ptr();
    auto od = out.ptr();
    Tape<S>::active()->record(out, [=](Tape<S>& tp) {
      const std::vector<S>* og = tp.grad_of(od.get());
      if (!og) return;
      std::vector<S>& dx = tp.grad_buffer(xd);
      for (size_t i = 0; i < og->size(); ++i) dx[i] += (*og)[i] * c;
    });
  }
  return out;
}

// Exact GELU, x/2 * (1 + erf(x / sqrt(2))).
template <class S>
Tensor<S> gelu(const Tensor<S>& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (int64_t i = 0; i < x.size(); ++i) {
    double v = double(x.data()[i]);
    out.data()[i] = S(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  check_finite("gelu", out.values());
  if (tracing<S>({&x})) {
    out = make_traced(std::move(out));
    auto xd = x.ptr();
    auto od = out.ptr();
    Tape<S>::active()->record(out, [=](Tape<S>& tp) {
      const std::vector<S>* og = tp.grad_of(od.get());
      if (!og) return;
      std::vector<S>& dx = tp.grad_buffer(xd);
      for (size_t i = 0; i < og->size(); ++i) {
        double v = double(xd->v[i]);
        double d = 0.5 * (1.0 + std::erf(v * inv_sqrt2)) +
                   v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
        dx[i] += (*og)[i] * S(d);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and normalizations

namespace detail {

// Decompose shape around `axis` into (outer, len, inner).
inline void axis_split(const Shape& s, int64_t axis, int64_t& outer,
                       int64_t& len, int64_t& inner) {
  int64_t r = int64_t(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis out of range");
  outer = 1;
  inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= s[size_t(i)];
  len = s[size_t(axis)];
  for (int64_t i = axis + 1; i < r; ++i) inner *= s[size_t(i)];
}

}  // namespace detail

// Numerically stable softmax along `axis` (max subtraction per lane).
template <class S>
Tensor<S> softmax(const Tensor<S>& x, int64_t axis = -1) {
  int64_t outer, len, inner;
  detail::axis_split(x.shape(), axis, outer, len, inner);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  const S* px = x.data();
  S* po = out.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t i = 0; i < inner; ++i) {
      const int64_t base = o * len * inner + i;
      S mx = px[base];
      for (int64_t k = 1; k < len; ++k)
        mx = std::max(mx, px[base + k * inner]);
      S sum = S(0);
      for (int64_t k = 0; k < len; ++k) {
        S e = std::exp(px[base + k * inner] - mx);
        po[base + k * inner] = e;
        sum += e;
      }
      for (int64_t k = 0; k < len; ++k) po[base + k * inner] /= sum;
    }
  }
  check_finite("softmax", out.values());
  if (tracing<S>({&x})) {
    out = make_traced(std::move(out));
    auto xd = x.ptr();
    auto od = out.ptr();
    Tape<S>::active()->record(out, [=](Tape<S>& tp) {
      const std::vector<S>* og = tp.grad_of(od.get());
      if (!og) return;
      std::vector<S>& dx = tp.grad_buffer(xd);
      const S* y = od->v.data();
      const S* g = og->data();
      for (int64_t o = 0; o < outer; ++o) {
        for (int64_t i = 0; i < inner; ++i) {
          const int64_t base = o * len * inner + i;
          S dot = S(0);
          for (int64_t k = 0; k < len; ++k) {
            const int64_t ix = base + k * inner;
            dot += g[ix] * y[ix];
          }
          for (int64_t k = 0; k < len; ++k) {
            const int64_t ix = base + k * inner;
            dx[size_t(ix)] += y[ix] * (g[ix] - dot);
          }
        }
      }
    });
  }
  return out;
}

// LayerNorm over the trailing dim with affine (gamma, beta), biased variance.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma,
                     const Tensor<S>& beta, S eps = S(1e-5)) {
  const int64_t D = x.dim(-1);
  if (gamma.size() != D || beta.size() != D)
    throw ShapeError("layer_norm: affine params must have length " +
                     std::to_string(D));
  const int64_t rows = x.size() / D;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  std::vector<S> inv_sigma(static_cast<size_t>(rows));
  std::vector<S> xhat(static_cast<size_t>(x.size()));
  const S* px = x.data();
  const S* pg = gamma.data();
  const S* pb = beta.data();
  S* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const S* row = px + r * D;
    S mean = S(0);
    for (int64_t j = 0; j < D; ++j) mean += row[j];
    mean /= S(D);
    S var = S(0);
    for (int64_t j = 0; j < D; ++j) {
      S d = row[j] - mean;
      var += d * d;
    }
    var /= S(D);
    S is = S(1) / std::sqrt(var + eps);
    inv_sigma[size_t(r)] = is;
    for (int64_t j = 0; j < D; ++j) {
      S h = (row[j] - mean) * is;
      xhat[size_t(r * D + j)] = h;
      po[r * D + j] = h * pg[j] + pb[j];
    }
  }
  check_finite("layer_norm", out.values());
  if (tracing<S>({&x, &gamma, &beta})) {
    out = make_traced(std::move(out));
    auto xd = x.ptr();
    auto gd = gamma.ptr();
    auto bd = beta.ptr();
    auto od = out.ptr();
    auto is = std::make_shared<std::vector<S>>(std::move(inv_sigma));
    auto xh = std::make_shared<std::vector<S>>(std::move(xhat));
    Tape<S>::active()->record(out, [=](Tape<S>& tp) {
      const std::vector<S>* og = tp.grad_of(od.get());
      if (!og) return;
      std::vector<S>& dx = tp.grad_buffer(xd);
      std::vector<S>& dg = tp.grad_buffer(gd);
      std::vector<S>& db = tp.grad_buffer(bd);
      const S* g = og->data();
      for (int64_t r = 0; r < rows; ++r) {
        const S* grow = g + r * D;
        const S* hrow = xh->data() + r * D;
        S sum_gg = S(0), sum_ggh = S(0);
        for (int64_t j = 0; j < D; ++j) {
          S gg = grow[j] * gd->v[size_t(j)];
          sum_gg += gg;
          sum_ggh += gg * hrow[j];
          dg[size_t(j)] += grow[j] * hrow[j];
          db[size_t(j)] += grow[j];
        }
        const S m1 = sum_gg / S(D);
        const S m2 = sum_ggh / S(D);
        const S s = (*is)[size_t(r)];
        for (int64_t j = 0; j < D; ++j) {
          S gg = grow[j] * gd->v[size_t(j)];
          dx[size_t(r * D + j)] += (gg - m1 - hrow[j] * m2) * s;
        }
      }
    });
  }
  return out;
}

// Mean over one axis (the axis is removed).
template <class S>
Tensor<S> mean_axis(const Tensor<S>& x, int64_t axis) {
  int64_t outer, len, inner;
  detail::axis_split(x.shape(), axis, outer, len, inner);
  Shape out_shape;
  int64_t r = x.rank();
  int64_t ax = axis < 0 ? axis + r : axis;
  for (int64_t i = 0; i < r; ++i)
    if (i != ax) out_shape.push_back(x.shape()[size_t(i)]);
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  const S* px = x.data();
  S* po = out.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t i = 0; i < inner; ++i) {
      S acc = S(0);
      for (int64_t k = 0; k < len; ++k) acc += px[o * len * inner + k * inner + i];
      po[o * inner + i] = acc / S(len);
    }
  }
  if (tracing<S>({&x})) {
    out = make_traced(std::move(out));
    auto xd = x.ptr();
    auto od = out.ptr();
    Tape<S>::active()->record(out, [=](Tape<S>& tp) {
      const std::vector<S>* og = tp.grad_of(od.get());
      if (!og) return;
      std::vector<S>& dx = tp.grad_buffer(xd);
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
          S g = (*og)[size_t(o * inner + i)] / S(len);
          for (int64_t k = 0; k < len; ++k)
            dx[size_t(o * len * inner + k * inner + i)] += g;
        }
    });
  }
  return out;
}

template <class S>
Tensor<S> sum_all(const Tensor<S>& x) {
  S acc = S(0);
  for (int64_t i = 0; i < x.size(); ++i) acc += x.data()[i];
  Tensor<S> out = Tensor<S>::scalar(acc);
  if (tracing<S>({&x})) {
    out = make_traced(std::move(out));
    auto xd = x.ptr();
    auto od = out.ptr();
    Tape<S>::active()->record(out, [=](Tape<S>& tp) {
      const std::vector<S>* og = tp.grad_of(od.get());
      if (!og) return;
      std::vector<S>& dx = tp.grad_buffer(xd);
      for (size_t i = 0; i < dx.size(); ++i) dx[i] += (*og)[0];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Loss, embedding, masking, misc model plumbing

// Mean cross-entropy from raw logits [B, C] via log-sum-exp.
template <class S>
Tensor<S> cross_entropy(const Tensor<S>& logits,
                        const std::vector<int64_t>& labels) {
  if (logits.rank() != 2)
    throw ShapeError("cross_entropy: logits must be [B, C], got " +
                     shape_str(logits.shape()));
  const int64_t B = logits.dim(0), C = logits.dim(1);
  if (int64_t(labels.size()) != B)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for batch " + std::to_string(B));
  for (int64_t b = 0; b < B; ++b)
    if (labels[size_t(b)] < 0 || labels[size_t(b)] >= C)
      throw ShapeError("cross_entropy: label " +
                       std::to_string(labels[size_t(b)]) +
                       " out of range [0," + std::to_string(C) + ")");
  const S* pz = logits.data();
  auto probs = std::make_shared<std::vector<S>>(size_t(B * C));
  S loss = S(0);
  for (int64_t b = 0; b < B; ++b) {
    const S* row = pz + b * C;
    S mx = row[0];
    for (int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    S sum = S(0);
    for (int64_t c = 0; c < C; ++c) {
      S e = std::exp(row[c] - mx);
      (*probs)[size_t(b * C + c)] = e;
      sum += e;
    }
    for (int64_t c = 0; c < C; ++c) (*probs)[size_t(b * C + c)] /= sum;
    loss += std::log(sum) + mx - row[labels[size_t(b)]];
  }
  loss /= S(B);
  if (!std::isfinite(loss)) throw NumericError("cross_entropy: non-finite loss");
  Tensor<S> out = Tensor<S>::scalar(loss);
  if (tracing<S>({&logits})) {
    out = make_traced(std::move(out));
    auto zd = logits.ptr();
    auto od = out.ptr();
    auto lab = labels;
    Tape<S>::active()->record(out, [=](Tape<S>& tp) {
      const std::vector<S>* og = tp.grad_of(od.get());
      if (!og) return;
      const S g = (*og)[0] / S(B);
      std::vector<S>& dz = tp.grad_buffer(zd);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
          S p = (*probs)[size_t(b * C + c)];
          dz[size_t(b * C + c)] +=
              g * (p - (c == lab[size_t(b)] ? S(1) : S(0)));
        }
    });
  }
  return out;
}

// Row gather: table [V, D], ids [B, N] -> [B, N, D]. Grad scatter-adds into
// the table in (b, n) order.
template <class S>
Tensor<S> embedding(const Tensor<S>& table,
                    const std::vector<int64_t>& ids, int64_t B, int64_t N) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be [V, D]");
  const int64_t V = table.dim(0), D = table.dim(1);
  if (int64_t(ids.size()) != B * N)
    throw ShapeError("embedding: ids size mismatch");
  for (int64_t id : ids)
    if (id < 0 || id >= V)
      throw ShapeError("embedding: id " + std::to_string(id) +
                       " out of range [0," + std::to_string(V) + ")");
  Tensor<S> out = Tensor<S>::zeros({B, N, D});
  for (int64_t i = 0; i < B * N; ++i)
    std::memcpy(out.data() + i * D, table.data() + ids[size_t(i)] * D,
                sizeof(S) * size_t(D));
  if (tracing<S>({&table})) {
    out = make_traced(std::move(out));
    auto td = table.ptr();
    auto od = out.ptr();
    auto idc = ids;
    Tape<S>::active()->record(out, [=](Tape<S>& tp) {
      const std::vector<S>* og = tp.grad_of(od.get());
      if (!og) return;
      std::vector<S>& dt = tp.grad_buffer(td);
      for (int64_t i = 0; i < B * N; ++i) {
        S* dst = dt.data() + idc[size_t(i)] * D;
        const S* src = og->data() + i * D;
        for (int64_t j = 0; j < D; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

// Per-sample boolean validity of token positions; shared by kernels and the
// harness. valid.size() == B * N, row-major.
struct TokenMask {
  int64_t batch = 0;
  int64_t tokens = 0;
  std::vector<uint8_t> valid;

  bool at(int64_t b, int64_t n) const { return valid[size_t(b * tokens + n)] != 0; }
  int64_t count(int64_t b) const {
    int64_t c = 0;
    for (int64_t n = 0; n < tokens; ++n) c += at(b, n);
    return c;
  }
};

// Overwrite sim entries on masked token columns with kMaskedLogit. sim is
// [B, H, M, N] (or [B, M, N]); the mask applies along the trailing axis.
template <class S>
Tensor<S> mask_token_axis(const Tensor<S>& sim, const TokenMask& mask) {
  if (sim.rank() < 3) throw ShapeError("mask_token_axis: rank < 3");
  const int64_t N = sim.dim(-1);
  const int64_t B = sim.dim(0);
  if (mask.batch != B || mask.tokens != N)
    throw ShapeError("mask_token_axis: mask is " + std::to_string(mask.batch) +
                     "x" + std::to_string(mask.tokens) + ", sim " +
                     shape_str(sim.shape()));
  for (int64_t b = 0; b < B; ++b)
    if (mask.count(b) == 0)
      throw ShapeError("mask_token_axis: sample " + std::to_string(b) +
                       " has all tokens masked");
  const int64_t rows = sim.size() / (B * N);
  Tensor<S> out = Tensor<S>::from(sim.shape(), sim.values());
  S* po = out.data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t n = 0; n < N; ++n)
        if (!mask.at(b, n)) po[(b * rows + r) * N + n] = S(kMaskedLogit);
  if (tracing<S>({&sim})) {
    out = make_traced(std::move(out));
    auto sd = sim.ptr();
    auto od = out.ptr();
    auto mk = std::make_shared<TokenMask>(mask);
    Tape<S>::active()->record(out, [=](Tape<S>& tp) {
      const std::vector<S>* og = tp.grad_of(od.get());
      if (!og) return;
      std::vector<S>& dx = tp.grad_buffer(sd);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t n = 0; n < N; ++n)
            if (mk->at(b, n))
              dx[size_t((b * rows + r) * N + n)] +=
                  (*og)[size_t((b * rows + r) * N + n)];
    });
  }
  return out;
}

// Repeat a [dims...] tensor across a new leading batch dim -> [B, dims...].
template <class S>
Tensor<S> tile_batch(const Tensor<S>& x, int64_t B) {
  Shape out_shape;
  out_shape.push_back(B);
  for (int64_t d : x.shape()) out_shape.push_back(d);
  Tensor<S> out = Tensor<S>::zeros(out_shape);
  const int64_t n = x.size();
  for (int64_t b = 0; b < B; ++b)
    std::memcpy(out.data() + b * n, x.data(), sizeof(S) * size_t(n));
  if (tracing<S>({&x})) {
    out = make_traced(std::move(out));
    auto xd = x.ptr();
    auto od = out.ptr();
    Tape<S>::active()->record(out, [=](Tape<S>& tp) {
      const std::vector<S>* og = tp.grad_of(od.get());
      if (!og) return;
      std::vector<S>& dx = tp.grad_buffer(xd);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < n; ++i) dx[size_t(i)] += (*og)[size_t(b * n + i)];
    });
  }
  return out;
}

// Multiply each sample's slice by a per-sample coefficient (drop-path).
template <class S>
Tensor<S> scale_per_sample(const Tensor<S>& x, const std::vector<S>& coef) {
  const int64_t B = x.dim(0);
  if (int64_t(coef.size()) != B)
    throw ShapeError("scale_per_sample: coef size mismatch");
  const int64_t n = x.size() / B;
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (int64_t b = 0; b < B; ++b)
    for (int64_t i = 0; i < n; ++i)
      out.data()[b * n + i] = x.data()[b * n + i] * coef[size_t(b)];
  if (tracing<S>({&x})) {
    out = make_traced(std::move(out));
    auto xd = x.ptr();
    auto od = out.ptr();
    auto c = coef;
    Tape<S>::active()->record(out, [=](Tape<S>& tp) {
      const std::vector<S>* og = tp.grad_of(od.get());
      if (!og) return;
      std::vector<S>& dx = tp.grad_buffer(xd);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < n; ++i)
          dx[size_t(b * n + i)] += (*og)[size_t(b * n + i)] * c[size_t(b)];
    });
  }
  return out;
}

// Mean over valid token rows: x [B, N, D], mask -> [B, D].
template <class S>
Tensor<S> masked_mean_tokens(const Tensor<S>& x, const TokenMask& mask) {
  if (x.rank() != 3) throw ShapeError("masked_mean_tokens: x must be [B,N,D]");
  const int64_t B = x.dim(0), N = x.dim(1), D = x.dim(2);
  if (mask.batch != B || mask.tokens != N)
    throw ShapeError("masked_mean_tokens: mask shape mismatch");
  Tensor<S> out = Tensor<S>::zeros({B, D});
  std::vector<S> inv_count(static_cast<size_t>(B));
  for (int64_t b = 0; b < B; ++b) {
    int64_t c = mask.count(b);
    if (c == 0)
      throw ShapeError("masked_mean_tokens: sample " + std::to_string(b) +
                       " has no valid tokens");
    inv_count[size_t(b)] = S(1) / S(c);
    for (int64_t n = 0; n < N; ++n) {
      if (!mask.at(b, n)) continue;
      for (int64_t j = 0; j < D; ++j)
        out.data()[b * D + j] += x.data()[(b * N + n) * D + j];
    }
    for (int64_t j = 0; j < D; ++j) out.data()[b * D + j] *= inv_count[size_t(b)];
  }
  if (tracing<S>({&x})) {
    out = make_traced(std::move(out));
    auto xd = x.ptr();
    auto od = out.ptr();
    auto mk = std::make_shared<TokenMask>(mask);
    auto ic = std::make_shared<std::vector<S>>(std::move(inv_count));
    Tape<S>::active()->record(out, [=](Tape<S>& tp) {
      const std::vector<S>* og = tp.grad_of(od.get());
      if (!og) return;
      std::vector<S>& dx = tp.grad_buffer(xd);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t n = 0; n < N; ++n) {
          if (!mk->at(b, n)) continue;
          for (int64_t j = 0; j < D; ++j)
            dx[size_t((b * N + n) * D + j)] +=
                (*og)[size_t(b * D + j)] * (*ic)[size_t(b)];
        }
    });
  }
  return out;
}

// Bilinear upsample of a [H, W, C] grid with align_corners semantics, so
// corner values are preserved exactly and interior points interpolate.
template <class S>
Tensor<S> bilinear_upsample(const Tensor<S>& x, int64_t out_h, int64_t out_w) {
  if (x.rank() != 3) throw ShapeError("bilinear_upsample: x must be [H,W,C]");
  const int64_t H = x.dim(0), W = x.dim(1), C = x.dim(2);
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_upsample: bad size");
  Tensor<S> out = Tensor<S>::zeros({out_h, out_w, C});
  auto src_pos = [](int64_t o, int64_t out_n, int64_t in_n) {
    if (out_n == 1) return 0.0;
    return double(o) * double(in_n - 1) / double(out_n - 1);
  };
  struct Tap {
    int64_t i0, i1;
    double w1;
  };
  std::vector<Tap> ty(static_cast<size_t>(out_h));
  std::vector<Tap> tx(static_cast<size_t>(out_w));
  for (int64_t y = 0; y < out_h; ++y) {
    double p = src_pos(y, out_h, H);
    int64_t i0 = int64_t(std::floor(p));
    ty[size_t(y)] = {i0, std::min(i0 + 1, H - 1), p - double(i0)};
  }
  for (int64_t xx = 0; xx < out_w; ++xx) {
    double p = src_pos(xx, out_w, W);
    int64_t i0 = int64_t(std::floor(p));
    tx[size_t(xx)] = {i0, std::min(i0 + 1, W - 1), p - double(i0)};
  }
  for (int64_t y = 0; y < out_h; ++y)
    for (int64_t xx = 0; xx < out_w; ++xx)
      for (int64_t c = 0; c < C; ++c) {
        const Tap& a = ty[size_t(y)];
        const Tap& b = tx[size_t(xx)];
        double v00 = double(x.at({a.i0, b.i0, c}));
        double v01 = double(x.at({a.i0, b.i1, c}));
        double v10 = double(x.at({a.i1, b.i0, c}));
        double v11 = double(x.at({a.i1, b.i1, c}));
        double top = v00 * (1 - b.w1) + v01 * b.w1;
        double bot = v10 * (1 - b.w1) + v11 * b.w1;
        out.data()[(y * out_w + xx) * C + c] = S(top * (1 - a.w1) + bot * a.w1);
      }
  if (tracing<S>({&x})) {
    out = make_traced(std::move(out));
    auto xd = x.ptr();
    auto od = out.ptr();
    auto tya = std::make_shared<std::vector<Tap>>(ty);
    auto txa = std::make_shared<std::vector<Tap>>(tx);
    Tape<S>::active()->record(out, [=](Tape<S>& tp) {
      const std::vector<S>* og = tp.grad_of(od.get());
      if (!og) return;
      std::vector<S>& dx = tp.grad_buffer(xd);
      for (int64_t y = 0; y < out_h; ++y)
        for (int64_t xx = 0; xx < out_w; ++xx) {
          const Tap& a = (*tya)[size_t(y)];
          const Tap& b = (*txa)[size_t(xx)];
          for (int64_t c = 0; c < C; ++c) {
            S g = (*og)[size_t((y * out_w + xx) * C + c)];
            dx[size_t((a.i0 * W + b.i0) * C + c)] += g * S((1 - a.w1) * (1 - b.w1));
            dx[size_t((a.i0 * W + b.i1) * C + c)] += g * S((1 - a.w1) * b.w1);
            dx[size_t((a.i1 * W + b.i0) * C + c)] += g * S(a.w1 * (1 - b.w1));
            dx[size_t((a.i1 * W + b.i1) * C + c)] += g * S(a.w1 * b.w1);
          }
        }
    });
  }
  return out;
}

// Argmax along the trailing dim, for evaluation. First max wins ties.
template <class S>
std::vector<int64_t> argmax_rows(const Tensor<S>& x) {
  const int64_t C = x.dim(-1);
  const int64_t rows = x.size() / C;
  std::vector<int64_t> out(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const S* row = x.data() + r * C;
    int64_t best = 0;
    for (int64_t c = 1; c < C; ++c)
      if (row[c] > row[best]) best = c;
    out[size_t(r)] = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient checking: f64 central differences against one analytic backward.

struct GradCheckEntry {
  std::string param;
  double max_rel_err = 0.0;
  int64_t worst_index = -1;
  double analytic = 0.0, numeric = 0.0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::vector<GradCheckEntry> entries;

  bool ok(double tol) const { return max_rel_err < tol; }
};

// `fn` rebuilds the scalar loss from the current parameter values each call.
// Parameters must be f64 leaves with requires_grad set.
template <class F>
GradCheckReport grad_check(F&& fn, std::vector<Tensor<double>> params,
                           double h = 1e-5) {
  for (auto& p : params) {
    if (!p.requires_grad())
      throw ShapeError("grad_check: param " + p.name() + " not differentiable");
    p.zero_grad();
  }
  {
    Tape<double> tape;
    typename Tape<double>::Scope scope(tape);
    Tensor<double> loss = fn();
    tape.backward(loss);
  }
  GradCheckReport report;
  for (auto& p : params) {
    GradCheckEntry e;
    e.param = p.name().empty() ? "<unnamed>" : p.name();
    std::vector<double> analytic =
        p.grad().empty() ? std::vector<double>(size_t(p.size()), 0.0) : p.grad();
    for (int64_t i = 0; i < p.size(); ++i) {
      const double saved = p.data()[i];
      p.data()[i] = saved + h;
      const double f1 = fn().item();
      p.data()[i] = saved - h;
      const double f2 = fn().item();
      p.data()[i] = saved;
      const double num = (f1 - f2) / (2.0 * h);
      const double ana = analytic[size_t(i)];
      const double err =
          std::abs(ana - num) / std::max(std::abs(ana) + std::abs(num), 1e-6);
      if (err > e.max_rel_err) {
        e.max_rel_err = err;
        e.worst_index = i;
        e.analytic = ana;
        e.numeric = num;
      }
    }
    if (e.max_rel_err > report.max_rel_err) {
      report.max_rel_err = e.max_rel_err;
      report.worst_param = e.param;
    }
    report.entries.push_back(std::move(e));
  }
  return report;
}

}  // namespace bixt
