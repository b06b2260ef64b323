// Copyright 2026 The thubert Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <unordered_map>
#include <utility>
#include <vector>

#include "thubert/common.hpp"

namespace thubert {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Dense 64-bit real tensor, row-major.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    THBT_CHECK(shape_numel(shape) == static_cast<int64_t>(data.size()),
               "tensor: shape ", shape_str(shape), " does not match data size ",
               data.size());
  }

  static Tensor zeros(Shape s) {
    auto n = shape_numel(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), 0.0));
  }
  static Tensor full(Shape s, double v) {
    auto n = shape_numel(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<size_t>(n), v));
  }
  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rows() const { return shape.empty() ? 1 : shape[0]; }
  int cols() const {
    if (shape.size() < 2) return shape.empty() ? 1 : 1;
    int64_t c = 1;
    for (size_t i = 1; i < shape.size(); ++i) c *= shape[i];
    return static_cast<int>(c);
  }
  double& at(int r, int c) { return data[static_cast<size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * cols() + c]; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline Tensor rand_uniform(Shape s, Rng& rng, double lo, double hi) {
  Tensor t = Tensor::zeros(std::move(s));
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

inline Tensor rand_normal(Shape s, Rng& rng, double stddev = 1.0) {
  Tensor t = Tensor::zeros(std::move(s));
  for (auto& v : t.data) v = stddev * rng.normal();
  return t;
}

/// Xavier-uniform init for a fan_in x fan_out weight.
inline Tensor xavier_uniform(int fan_in, int fan_out, Rng& rng) {
  double a = std::sqrt(6.0 / (fan_in + fan_out));
  return rand_uniform({fan_in, fan_out}, rng, -a, a);
}

// ---------------------------------------------------------------------------
// GEMM kernel. Row partitioning uses fixed 64-row blocks so multithreaded
// results are bit-identical to serial (see parallel_blocks).
// ---------------------------------------------------------------------------

namespace detail {

using CMat = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                            Eigen::RowMajor>>;
using MMat = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                      Eigen::RowMajor>>;

/// C (MxN) += or = A (MxK) * B (KxN), with optional transposes on A/B given
/// as already-shaped views by the caller via leading dims.
inline void gemm(const double* a, int am, int an, bool ta, const double* b, int bm,
                 int bn, bool tb, double* c, bool accumulate) {
  const int m = ta ? an : am;
  const int k = ta ? am : an;
  const int n = tb ? bm : bn;
  CMat A(a, am, an);
  CMat B(b, bm, bn);
  parallel_blocks(m, 64, [&](int64_t r0, int64_t r1) {
    MMat C(c + r0 * n, r1 - r0, n);
    auto write = [&](const auto& prod) {
      if (accumulate)
        C.noalias() += prod;
      else
        C.noalias() = prod;
    };
    if (!ta && !tb)
      write(A.middleRows(r0, r1 - r0) * B);
    else if (!ta && tb)
      write(A.middleRows(r0, r1 - r0) * B.transpose());
    else if (ta && !tb)
      write(A.transpose().middleRows(r0, r1 - r0) * B);
    else
      write(A.transpose().middleRows(r0, r1 - r0) * B.transpose());
  });
  (void)k;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Reverse-mode tape.
// ---------------------------------------------------------------------------

class Tape;

/// Handle into a Tape's node list.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

/// Append-only computation graph. Topological order equals append order.
class Tape {
 public:
  explicit Tape(uint64_t dropout_seed = 0) : dropout_seed_(dropout_seed) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad) {
    return push("leaf", std::move(value), {}, requires_grad, nullptr);
  }
  Var leaf(const Tensor& value) { return leaf(value, value.requires_grad); }
  Var constant(Tensor value) { return push("const", std::move(value), {}, false, nullptr); }

  const Tensor& val(Var v) const { return nodes_[check(v)].value; }
  const Shape& shape(Var v) const { return nodes_[check(v)].value.shape; }
  bool requires_grad(Var v) const { return nodes_[check(v)].requires_grad; }
  size_t size() const { return nodes_.size(); }
  uint64_t dropout_seed() const { return dropout_seed_; }

  /// Registers a new node. `backward` accumulates into parents' grad buffers;
  /// it may be null for nodes with no differentiable inputs.
  Var push(const char* op, Tensor value, std::vector<int> parents, bool requires_grad,
           std::function<void(Tape&, int)> backward) {
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.requires_grad = requires_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  /// Reverse pass from a scalar loss. Each node is visited exactly once, in
  /// reverse append order. Gradients of all requires_grad nodes become
  /// available through grad().
  void backward(Var loss) {
    int lid = check(loss);
    THBT_CHECK(nodes_[lid].value.numel() == 1, "backward: loss must be scalar, got shape ",
               shape_str(nodes_[lid].value.shape));
    THBT_CHECK(nodes_[lid].requires_grad,
               "backward: loss does not depend on any requires_grad leaf");
    grads_.assign(nodes_.size(), {});
    grads_[lid].assign(1, 1.0);
    for (int i = lid; i >= 0; --i) {
      if (!nodes_[i].requires_grad || grads_[i].empty()) continue;
      if (nodes_[i].backward) nodes_[i].backward(*this, i);
    }
    have_grads_ = true;
  }

  /// Gradient of the last backward() loss w.r.t. v. Zero tensor if v was
  /// never reached.
  Tensor grad(Var v) const {
    THBT_CHECK(have_grads_, "grad: call backward() first");
    int id = check(v);
    Tensor g = Tensor::zeros(nodes_[id].value.shape);
    if (!grads_[id].empty()) g.data = grads_[id];
    return g;
  }

  /// Mutable gradient buffer of node `id`, allocated on demand. For use by
  /// backward closures only.
  std::vector<double>& grad_buffer(int id) {
    auto& g = grads_[id];
    if (g.empty()) g.assign(nodes_[id].value.data.size(), 0.0);
    return g;
  }
  /// Upstream gradient flowing into node `id`.
  const std::vector<double>& incoming(int id) const { return grads_[id]; }
  const Tensor& value_of(int id) const { return nodes_[id].value; }
  bool node_requires_grad(int id) const { return nodes_[id].requires_grad; }

 private:
  struct Node {
    const char* op;
    Tensor value;
    std::vector<int> parents;
    bool requires_grad;
    std::function<void(Tape&, int)> backward;
  };

  int check(Var v) const {
    THBT_CHECK(v.tape == this && v.id >= 0 && v.id < static_cast<int>(nodes_.size()),
               "tape: foreign or invalid var");
    return v.id;
  }

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  bool have_grads_ = false;
  uint64_t dropout_seed_;
};

// ---------------------------------------------------------------------------
// Primitives. Shape checks throw Error naming the primitive and both shapes.
// ---------------------------------------------------------------------------

namespace detail {

inline Tape* same_tape(Var a, Var b, const char* op) {
  THBT_CHECK(a.valid() && b.valid() && a.tape == b.tape, op,
             ": operands on different tapes");
  return a.tape;
}

inline void same_shape(const Shape& a, const Shape& b, const char* op) {
  THBT_CHECK(a == b, op, ": shape mismatch ", shape_str(a), " vs ", shape_str(b));
}

inline int last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

inline int64_t row_count(const Shape& s) {
  return s.empty() ? 1 : shape_numel(s) / last_dim(s);
}

}  // namespace detail

/// Elementwise a + b (identical shapes).
inline Var add(Var a, Var b) {
  Tape* t = detail::same_tape(a, b, "add");
  const Tensor& ta = t->val(a);
  const Tensor& tb = t->val(b);
  detail::same_shape(ta.shape, tb.shape, "add");
  Tensor out = ta;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += tb.data[i];
  bool rg = t->requires_grad(a) || t->requires_grad(b);
  int ia = a.id, ib = b.id;
  return t->push("add", std::move(out), {ia, ib}, rg, [ia, ib](Tape& tp, int self) {
    const auto& g = tp.incoming(self);
    if (tp.node_requires_grad(ia)) {
      auto& ga = tp.grad_buffer(ia);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.node_requires_grad(ib)) {
      auto& gb = tp.grad_buffer(ib);
      for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

/// x (.. x D) + bias (D), broadcast over leading dims. The only broadcast in
/// the engine.
inline Var add_bias(Var x, Var bias) {
  Tape* t = detail::same_tape(x, bias, "add_bias");
  const Tensor& tx = t->val(x);
  const Tensor& tb = t->val(bias);
  int d = detail::last_dim(tx.shape);
  THBT_CHECK(tb.shape.size() == 1 && tb.shape[0] == d, "add_bias: bias shape ",
             shape_str(tb.shape), " does not match trailing dim of ",
             shape_str(tx.shape));
  Tensor out = tx;
  int64_t rows = detail::row_count(tx.shape);
  for (int64_t r = 0; r < rows; ++r)
    for (int c = 0; c < d; ++c) out.data[r * d + c] += tb.data[c];
  bool rg = t->requires_grad(x) || t->requires_grad(bias);
  int ix = x.id, ib = bias.id;
  return t->push("add_bias", std::move(out), {ix, ib}, rg,
                 [ix, ib, rows, d](Tape& tp, int self) {
                   const auto& g = tp.incoming(self);
                   if (tp.node_requires_grad(ix)) {
                     auto& gx = tp.grad_buffer(ix);
                     for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                   }
                   if (tp.node_requires_grad(ib)) {
                     auto& gb = tp.grad_buffer(ib);
                     for (int64_t r = 0; r < rows; ++r)
                       for (int c = 0; c < d; ++c) gb[c] += g[r * d + c];
                   }
                 });
}

/// Elementwise a - b.
inline Var sub(Var a, Var b) {
  Tape* t = detail::same_tape(a, b, "sub");
  const Tensor& ta = t->val(a);
  const Tensor& tb = t->val(b);
  detail::same_shape(ta.shape, tb.shape, "sub");
  Tensor out = ta;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= tb.data[i];
  bool rg = t->requires_grad(a) || t->requires_grad(b);
  int ia = a.id, ib = b.id;
  return t->push("sub", std::move(out), {ia, ib}, rg, [ia, ib](Tape& tp, int self) {
    const auto& g = tp.incoming(self);
    if (tp.node_requires_grad(ia)) {
      auto& ga = tp.grad_buffer(ia);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.node_requires_grad(ib)) {
      auto& gb = tp.grad_buffer(ib);
      for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

/// Elementwise a * b.
inline Var mul(Var a, Var b) {
  Tape* t = detail::same_tape(a, b, "mul");
  const Tensor& ta = t->val(a);
  const Tensor& tb = t->val(b);
  detail::same_shape(ta.shape, tb.shape, "mul");
  Tensor out = ta;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= tb.data[i];
  bool rg = t->requires_grad(a) || t->requires_grad(b);
  int ia = a.id, ib = b.id;
  return t->push("mul", std::move(out), {ia, ib}, rg, [ia, ib](Tape& tp, int self) {
    const auto& g = tp.incoming(self);
    const auto& va = tp.value_of(ia).data;
    const auto& vb = tp.value_of(ib).data;
    if (tp.node_requires_grad(ia)) {
      auto& ga = tp.grad_buffer(ia);
      for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (tp.node_requires_grad(ib)) {
      auto& gb = tp.grad_buffer(ib);
      for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
    }
  });
}

/// c * x for a plain constant c.
inline Var scale(Var x, double c) {
  Tape* t = x.tape;
  Tensor out = t->val(x);
  for (auto& v : out.data) v *= c;
  int ix = x.id;
  return t->push("scale", std::move(out), {ix}, t->requires_grad(x),
                 [ix, c](Tape& tp, int self) {
                   if (!tp.node_requires_grad(ix)) return;
                   const auto& g = tp.incoming(self);
                   auto& gx = tp.grad_buffer(ix);
                   for (size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
                 });
}

/// x + c elementwise for a plain constant c.
inline Var add_scalar(Var x, double c) {
  Tape* t = x.tape;
  Tensor out = t->val(x);
  for (auto& v : out.data) v += c;
  int ix = x.id;
  return t->push("add_scalar", std::move(out), {ix}, t->requires_grad(x),
                 [ix](Tape& tp, int self) {
                   if (!tp.node_requires_grad(ix)) return;
                   const auto& g = tp.incoming(self);
                   auto& gx = tp.grad_buffer(ix);
                   for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                 });
}

inline Var neg(Var x) { return scale(x, -1.0); }

/// 2-D matrix product (M x K) * (K x N).
inline Var matmul(Var a, Var b) {
  Tape* t = detail::same_tape(a, b, "matmul");
  const Tensor& ta = t->val(a);
  const Tensor& tb = t->val(b);
  THBT_CHECK(ta.shape.size() == 2 && tb.shape.size() == 2 && ta.shape[1] == tb.shape[0],
             "matmul: shape mismatch ", shape_str(ta.shape), " vs ", shape_str(tb.shape));
  const int m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
  Tensor out = Tensor::zeros({m, n});
  detail::gemm(ta.data.data(), m, k, false, tb.data.data(), k, n, false,
               out.data.data(), false);
  bool rg = t->requires_grad(a) || t->requires_grad(b);
  int ia = a.id, ib = b.id;
  return t->push("matmul", std::move(out), {ia, ib}, rg,
                 [ia, ib, m, k, n](Tape& tp, int self) {
                   const auto& g = tp.incoming(self);
                   const auto& va = tp.value_of(ia).data;
                   const auto& vb = tp.value_of(ib).data;
                   if (tp.node_requires_grad(ia)) {
                     // dA = G * B^T
                     detail::gemm(g.data(), m, n, false, vb.data(), k, n, true,
                                  tp.grad_buffer(ia).data(), true);
                   }
                   if (tp.node_requires_grad(ib)) {
                     // dB = A^T * G
                     detail::gemm(va.data(), m, k, true, g.data(), m, n, false,
                                  tp.grad_buffer(ib).data(), true);
                   }
                 });
}

/// 2-D transpose.
inline Var transpose(Var x) {
  Tape* t = x.tape;
  const Tensor& tx = t->val(x);
  THBT_CHECK(tx.shape.size() == 2, "transpose: expected rank-2, got ",
             shape_str(tx.shape));
  int r = tx.shape[0], c = tx.shape[1];
  Tensor out = Tensor::zeros({c, r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.data[static_cast<size_t>(j) * r + i] = tx.data[static_cast<size_t>(i) * c + j];
  int ix = x.id;
  return t->push("transpose", std::move(out), {ix}, t->requires_grad(x),
                 [ix, r, c](Tape& tp, int self) {
                   if (!tp.node_requires_grad(ix)) return;
                   const auto& g = tp.incoming(self);
                   auto& gx = tp.grad_buffer(ix);
                   for (int j = 0; j < c; ++j)
                     for (int i = 0; i < r; ++i)
                       gx[static_cast<size_t>(i) * c + j] += g[static_cast<size_t>(j) * r + i];
                 });
}

/// Same data, new shape.
inline Var reshape(Var x, Shape s) {
  Tape* t = x.tape;
  const Tensor& tx = t->val(x);
  THBT_CHECK(shape_numel(s) == tx.numel(), "reshape: cannot view ",
             shape_str(tx.shape), " as ", shape_str(s));
  Tensor out(std::move(s), tx.data);
  int ix = x.id;
  return t->push("reshape", std::move(out), {ix}, t->requires_grad(x),
                 [ix](Tape& tp, int self) {
                   if (!tp.node_requires_grad(ix)) return;
                   const auto& g = tp.incoming(self);
                   auto& gx = tp.grad_buffer(ix);
                   for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                 });
}

/// Generic static rearrangement: out flat index j takes in flat index idx[j].
/// Covers slice, flip, and axis permutes; backward scatter-adds.
inline Var gather_flat(Var x, std::vector<int64_t> idx, Shape out_shape) {
  Tape* t = x.tape;
  const Tensor& tx = t->val(x);
  THBT_CHECK(shape_numel(out_shape) == static_cast<int64_t>(idx.size()),
             "gather: index count ", idx.size(), " does not fill ",
             shape_str(out_shape));
  Tensor out = Tensor::zeros(std::move(out_shape));
  for (size_t j = 0; j < idx.size(); ++j) {
    THBT_CHECK(idx[j] >= 0 && idx[j] < tx.numel(), "gather: index ", idx[j],
               " out of range for ", shape_str(tx.shape));
    out.data[j] = tx.data[static_cast<size_t>(idx[j])];
  }
  int ix = x.id;
  auto shared = std::make_shared<std::vector<int64_t>>(std::move(idx));
  return t->push("gather", std::move(out), {ix}, t->requires_grad(x),
                 [ix, shared](Tape& tp, int self) {
                   if (!tp.node_requires_grad(ix)) return;
                   const auto& g = tp.incoming(self);
                   auto& gx = tp.grad_buffer(ix);
                   for (size_t j = 0; j < g.size(); ++j)
                     gx[static_cast<size_t>((*shared)[j])] += g[j];
                 });
}

/// Rows [r0, r1) of a rank >= 1 tensor.
inline Var slice_rows(Var x, int r0, int r1) {
  const Tensor& tx = x.tape->val(x);
  int rows = tx.shape.empty() ? 1 : tx.shape[0];
  THBT_CHECK(0 <= r0 && r0 <= r1 && r1 <= rows, "slice_rows: range [", r0, ",", r1,
             ") invalid for ", shape_str(tx.shape));
  int64_t stride = tx.shape.empty() ? 1 : tx.numel() / rows;
  std::vector<int64_t> idx;
  idx.reserve(static_cast<size_t>((r1 - r0) * stride));
  for (int r = r0; r < r1; ++r)
    for (int64_t c = 0; c < stride; ++c) idx.push_back(r * stride + c);
  Shape s = tx.shape;
  s[0] = r1 - r0;
  return gather_flat(x, std::move(idx), std::move(s));
}

/// Columns [c0, c1) of a rank-2 tensor.
inline Var slice_cols(Var x, int c0, int c1) {
  const Tensor& tx = x.tape->val(x);
  THBT_CHECK(tx.shape.size() == 2, "slice_cols: expected rank-2, got ",
             shape_str(tx.shape));
  int rows = tx.shape[0], cols = tx.shape[1];
  THBT_CHECK(0 <= c0 && c0 <= c1 && c1 <= cols, "slice_cols: range [", c0, ",", c1,
             ") invalid for ", shape_str(tx.shape));
  std::vector<int64_t> idx;
  idx.reserve(static_cast<size_t>(rows) * (c1 - c0));
  for (int r = 0; r < rows; ++r)
    for (int c = c0; c < c1; ++c) idx.push_back(static_cast<int64_t>(r) * cols + c);
  return gather_flat(x, std::move(idx), {rows, c1 - c0});
}

/// Horizontal concatenation of rank-2 tensors with equal row counts.
inline Var concat_cols(const std::vector<Var>& xs) {
  THBT_CHECK(!xs.empty(), "concat_cols: empty input");
  Tape* t = xs[0].tape;
  int rows = t->val(xs[0]).shape[0];
  int total = 0;
  for (Var v : xs) {
    const Tensor& tv = t->val(v);
    THBT_CHECK(tv.shape.size() == 2 && tv.shape[0] == rows,
               "concat_cols: incompatible shape ", shape_str(tv.shape));
    total += tv.shape[1];
  }
  Tensor out = Tensor::zeros({rows, total});
  std::vector<int> ids, widths;
  bool rg = false;
  int off = 0;
  for (Var v : xs) {
    const Tensor& tv = t->val(v);
    int w = tv.shape[1];
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < w; ++c)
        out.data[static_cast<size_t>(r) * total + off + c] = tv.data[static_cast<size_t>(r) * w + c];
    ids.push_back(v.id);
    widths.push_back(w);
    rg = rg || t->requires_grad(v);
    off += w;
  }
  return t->push("concat_cols", std::move(out), ids, rg,
                 [ids, widths, rows, total](Tape& tp, int self) {
                   const auto& g = tp.incoming(self);
                   int off2 = 0;
                   for (size_t k = 0; k < ids.size(); ++k) {
                     int w = widths[k];
                     if (tp.node_requires_grad(ids[k])) {
                       auto& gx = tp.grad_buffer(ids[k]);
                       for (int r = 0; r < rows; ++r)
                         for (int c = 0; c < w; ++c)
                           gx[static_cast<size_t>(r) * w + c] +=
                               g[static_cast<size_t>(r) * total + off2 + c];
                     }
                     off2 += w;
                   }
                 });
}

/// Reverse row order (time flip).
inline Var flip_rows(Var x) {
  const Tensor& tx = x.tape->val(x);
  int rows = tx.shape.empty() ? 1 : tx.shape[0];
  int64_t stride = rows == 0 ? 0 : tx.numel() / std::max(rows, 1);
  std::vector<int64_t> idx;
  idx.reserve(static_cast<size_t>(tx.numel()));
  for (int r = rows - 1; r >= 0; --r)
    for (int64_t c = 0; c < stride; ++c) idx.push_back(r * stride + c);
  return gather_flat(x, std::move(idx), tx.shape);
}

/// Zero-pad rows at top/bottom (time padding for same-padding convs).
inline Var pad_rows(Var x, int top, int bottom) {
  Tape* t = x.tape;
  const Tensor& tx = t->val(x);
  THBT_CHECK(tx.shape.size() == 2 && top >= 0 && bottom >= 0, "pad_rows: bad args for ",
             shape_str(tx.shape));
  int rows = tx.shape[0], cols = tx.shape[1];
  Tensor out = Tensor::zeros({rows + top + bottom, cols});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      out.data[static_cast<size_t>(r + top) * cols + c] = tx.data[static_cast<size_t>(r) * cols + c];
  int ix = x.id;
  return t->push("pad_rows", std::move(out), {ix}, t->requires_grad(x),
                 [ix, top, rows, cols](Tape& tp, int self) {
                   if (!tp.node_requires_grad(ix)) return;
                   const auto& g = tp.incoming(self);
                   auto& gx = tp.grad_buffer(ix);
                   for (int r = 0; r < rows; ++r)
                     for (int c = 0; c < cols; ++c)
                       gx[static_cast<size_t>(r) * cols + c] +=
                           g[static_cast<size_t>(r + top) * cols + c];
                 });
}

/// 1-D convolution, valid, no dilation. x: T x Cin, w: Cout x Cin x K.
/// Output: Tout x Cout with Tout = floor((T - K) / stride) + 1.
inline Var conv1d(Var x, Var w, int stride) {
  Tape* t = detail::same_tape(x, w, "conv1d");
  const Tensor& tx = t->val(x);
  const Tensor& tw = t->val(w);
  THBT_CHECK(tx.shape.size() == 2 && tw.shape.size() == 3 && tx.shape[1] == tw.shape[1],
             "conv1d: shape mismatch ", shape_str(tx.shape), " vs kernel ",
             shape_str(tw.shape));
  THBT_CHECK(stride >= 1, "conv1d: stride must be >= 1, got ", stride);
  const int T = tx.shape[0], cin = tx.shape[1];
  const int cout = tw.shape[0], K = tw.shape[2];
  THBT_CHECK(T >= K, "conv1d: input length ", T, " shorter than kernel ", K);
  const int tout = (T - K) / stride + 1;

  // im2col: col[t, k*cin + c] = x[t*stride + k, c]; wmat[o, k*cin + c] = w[o,c,k].
  std::vector<double> col(static_cast<size_t>(tout) * K * cin);
  for (int ti = 0; ti < tout; ++ti)
    for (int k = 0; k < K; ++k)
      for (int c = 0; c < cin; ++c)
        col[(static_cast<size_t>(ti) * K + k) * cin + c] =
            tx.data[static_cast<size_t>(ti * stride + k) * cin + c];
  std::vector<double> wmat(static_cast<size_t>(cout) * K * cin);
  for (int o = 0; o < cout; ++o)
    for (int c = 0; c < cin; ++c)
      for (int k = 0; k < K; ++k)
        wmat[(static_cast<size_t>(o) * K + k) * cin + c] =
            tw.data[(static_cast<size_t>(o) * cin + c) * K + k];

  Tensor out = Tensor::zeros({tout, cout});
  detail::gemm(col.data(), tout, K * cin, false, wmat.data(), cout, K * cin, true,
               out.data.data(), false);

  bool rg = t->requires_grad(x) || t->requires_grad(w);
  int ix = x.id, iw = w.id;
  auto col_s = std::make_shared<std::vector<double>>(std::move(col));
  auto wmat_s = std::make_shared<std::vector<double>>(std::move(wmat));
  return t->push(
      "conv1d", std::move(out), {ix, iw}, rg,
      [ix, iw, stride, T, cin, cout, K, tout, col_s, wmat_s](Tape& tp, int self) {
        const auto& g = tp.incoming(self);  // tout x cout
        if (tp.node_requires_grad(ix)) {
          std::vector<double> dcol(static_cast<size_t>(tout) * K * cin, 0.0);
          detail::gemm(g.data(), tout, cout, false, wmat_s->data(), cout, K * cin,
                       false, dcol.data(), false);
          auto& gx = tp.grad_buffer(ix);
          for (int ti = 0; ti < tout; ++ti)
            for (int k = 0; k < K; ++k)
              for (int c = 0; c < cin; ++c)
                gx[static_cast<size_t>(ti * stride + k) * cin + c] +=
                    dcol[(static_cast<size_t>(ti) * K + k) * cin + c];
        }
        if (tp.node_requires_grad(iw)) {
          std::vector<double> dwmat(static_cast<size_t>(cout) * K * cin, 0.0);
          detail::gemm(g.data(), tout, cout, true, col_s->data(), tout, K * cin, false,
                       dwmat.data(), false);
          auto& gw = tp.grad_buffer(iw);
          for (int o = 0; o < cout; ++o)
            for (int c = 0; c < cin; ++c)
              for (int k = 0; k < K; ++k)
                gw[(static_cast<size_t>(o) * cin + c) * K + k] +=
                    dwmat[(static_cast<size_t>(o) * K + k) * cin + c];
        }
      });
}

namespace detail {

template <typename FwdFn, typename BwdFn>
Var unary_elementwise(Var x, const char* op, FwdFn f, BwdFn dfdx_from_xy) {
  Tape* t = x.tape;
  Tensor out = t->val(x);
  for (auto& v : out.data) v = f(v);
  int ix = x.id;
  return t->push(op, std::move(out), {ix}, t->requires_grad(x),
                 [ix, dfdx_from_xy](Tape& tp, int self) {
                   if (!tp.node_requires_grad(ix)) return;
                   const auto& g = tp.incoming(self);
                   const auto& xv = tp.value_of(ix).data;
                   const auto& yv = tp.value_of(self).data;
                   auto& gx = tp.grad_buffer(ix);
                   for (size_t i = 0; i < g.size(); ++i)
                     gx[i] += g[i] * dfdx_from_xy(xv[i], yv[i]);
                 });
}

}  // namespace detail

inline Var relu(Var x) {
  return detail::unary_elementwise(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double xv, double) { return xv > 0.0 ? 1.0 : 0.0; });
}

/// Exact GELU: x * Phi(x).
inline Var gelu(Var x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return detail::unary_elementwise(
      x, "gelu",
      [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double xv, double) {
        double phi = 0.5 * (1.0 + std::erf(xv * inv_sqrt2));
        return phi + xv * inv_sqrt2pi * std::exp(-0.5 * xv * xv);
      });
}

inline Var tanh_op(Var x) {
  return detail::unary_elementwise(
      x, "tanh", [](double v) { return std::tanh(v); },
      [](double, double yv) { return 1.0 - yv * yv; });
}

/// log(1 + exp(x)), overflow-safe; derivative is sigmoid(x).
inline Var softplus(Var x) {
  return detail::unary_elementwise(
      x, "softplus",
      [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); },
      [](double xv, double) { return 1.0 / (1.0 + std::exp(-xv)); });
}

inline Var exp_op(Var x) {
  return detail::unary_elementwise(
      x, "exp", [](double v) { return std::exp(v); },
      [](double, double yv) { return yv; });
}

inline Var log_op(Var x) {
  return detail::unary_elementwise(
      x, "log", [](double v) { return std::log(v); },
      [](double xv, double) { return 1.0 / xv; });
}

namespace detail {

inline void softmax_row(const double* in, double* out, int d) {
  double mx = in[0];
  for (int i = 1; i < d; ++i) mx = std::max(mx, in[i]);
  double sum = 0.0;
  for (int i = 0; i < d; ++i) {
    out[i] = std::exp(in[i] - mx);
    sum += out[i];
  }
  for (int i = 0; i < d; ++i) out[i] /= sum;
}

}  // namespace detail

/// Softmax along the last axis.
inline Var softmax(Var x) {
  Tape* t = x.tape;
  const Tensor& tx = t->val(x);
  int d = detail::last_dim(tx.shape);
  int64_t rows = detail::row_count(tx.shape);
  Tensor out = Tensor::zeros(tx.shape);
  for (int64_t r = 0; r < rows; ++r)
    detail::softmax_row(tx.data.data() + r * d, out.data.data() + r * d, d);
  int ix = x.id;
  return t->push("softmax", std::move(out), {ix}, t->requires_grad(x),
                 [ix, rows, d](Tape& tp, int self) {
                   if (!tp.node_requires_grad(ix)) return;
                   const auto& g = tp.incoming(self);
                   const auto& y = tp.value_of(self).data;
                   auto& gx = tp.grad_buffer(ix);
                   for (int64_t r = 0; r < rows; ++r) {
                     double dot = 0.0;
                     for (int i = 0; i < d; ++i) dot += g[r * d + i] * y[r * d + i];
                     for (int i = 0; i < d; ++i)
                       gx[r * d + i] += y[r * d + i] * (g[r * d + i] - dot);
                   }
                 });
}

/// Log-softmax along the last axis.
inline Var log_softmax(Var x) {
  Tape* t = x.tape;
  const Tensor& tx = t->val(x);
  int d = detail::last_dim(tx.shape);
  int64_t rows = detail::row_count(tx.shape);
  Tensor out = Tensor::zeros(tx.shape);
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = tx.data.data() + r * d;
    double* o = out.data.data() + r * d;
    double mx = in[0];
    for (int i = 1; i < d; ++i) mx = std::max(mx, in[i]);
    double sum = 0.0;
    for (int i = 0; i < d; ++i) sum += std::exp(in[i] - mx);
    double lse = mx + std::log(sum);
    for (int i = 0; i < d; ++i) o[i] = in[i] - lse;
  }
  int ix = x.id;
  return t->push("log_softmax", std::move(out), {ix}, t->requires_grad(x),
                 [ix, rows, d](Tape& tp, int self) {
                   if (!tp.node_requires_grad(ix)) return;
                   const auto& g = tp.incoming(self);
                   const auto& y = tp.value_of(self).data;
                   auto& gx = tp.grad_buffer(ix);
                   for (int64_t r = 0; r < rows; ++r) {
                     double gsum = 0.0;
                     for (int i = 0; i < d; ++i) gsum += g[r * d + i];
                     for (int i = 0; i < d; ++i)
                       gx[r * d + i] += g[r * d + i] - std::exp(y[r * d + i]) * gsum;
                   }
                 });
}

/// Layer norm along the last axis with learned gain and bias (each D).
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
  Tape* t = x.tape;
  const Tensor& tx = t->val(x);
  const Tensor& tg = t->val(gain);
  const Tensor& tb = t->val(bias);
  int d = detail::last_dim(tx.shape);
  THBT_CHECK(tg.shape == Shape{d} && tb.shape == Shape{d},
             "layer_norm: gain/bias shape mismatch for ", shape_str(tx.shape));
  int64_t rows = detail::row_count(tx.shape);
  Tensor out = Tensor::zeros(tx.shape);
  auto xhat = std::make_shared<std::vector<double>>(tx.data.size());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* in = tx.data.data() + r * d;
    double mean = 0.0;
    for (int i = 0; i < d; ++i) mean += in[i];
    mean /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) var += (in[i] - mean) * (in[i] - mean);
    var /= d;
    double istd = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(r)] = istd;
    for (int i = 0; i < d; ++i) {
      double xh = (in[i] - mean) * istd;
      (*xhat)[r * d + i] = xh;
      out.data[r * d + i] = tg.data[i] * xh + tb.data[i];
    }
  }
  bool rg = t->requires_grad(x) || t->requires_grad(gain) || t->requires_grad(bias);
  int ix = x.id, ig = gain.id, ib = bias.id;
  return t->push("layer_norm", std::move(out), {ix, ig, ib}, rg,
                 [ix, ig, ib, rows, d, xhat, inv_std](Tape& tp, int self) {
                   const auto& g = tp.incoming(self);
                   const auto& gainv = tp.value_of(ig).data;
                   if (tp.node_requires_grad(ig)) {
                     auto& gg = tp.grad_buffer(ig);
                     for (int64_t r = 0; r < rows; ++r)
                       for (int i = 0; i < d; ++i)
                         gg[i] += g[r * d + i] * (*xhat)[r * d + i];
                   }
                   if (tp.node_requires_grad(ib)) {
                     auto& gb = tp.grad_buffer(ib);
                     for (int64_t r = 0; r < rows; ++r)
                       for (int i = 0; i < d; ++i) gb[i] += g[r * d + i];
                   }
                   if (tp.node_requires_grad(ix)) {
                     auto& gx = tp.grad_buffer(ix);
                     for (int64_t r = 0; r < rows; ++r) {
                       double sum_gy = 0.0, sum_gyx = 0.0;
                       for (int i = 0; i < d; ++i) {
                         double gy = g[r * d + i] * gainv[i];
                         sum_gy += gy;
                         sum_gyx += gy * (*xhat)[r * d + i];
                       }
                       double istd = (*inv_std)[static_cast<size_t>(r)];
                       for (int i = 0; i < d; ++i) {
                         double gy = g[r * d + i] * gainv[i];
                         gx[r * d + i] += istd * (gy - sum_gy / d -
                                                  (*xhat)[r * d + i] * sum_gyx / d);
                       }
                     }
                   }
                 });
}

/// Running statistics for batch_norm, owned by the caller (serialized with
/// the parameter set; not updated by optimizers).
struct BatchNormState {
  Tensor running_mean;  // D
  Tensor running_var;   // D
  double momentum = 0.9;
  int64_t steps_seen = 0;
};

/// Batch norm over rows (per-column statistics) of a T x D input.
/// Training mode uses batch statistics and updates `state`; eval mode uses
/// the running statistics and is a per-column affine map.
inline Var batch_norm(Var x, Var gamma, Var beta, BatchNormState& state, bool training,
                      double eps = 1e-5) {
  Tape* t = x.tape;
  const Tensor& tx = t->val(x);
  THBT_CHECK(tx.shape.size() == 2, "batch_norm: expected rank-2, got ",
             shape_str(tx.shape));
  int T = tx.shape[0], d = tx.shape[1];
  const Tensor& tg = t->val(gamma);
  const Tensor& tb = t->val(beta);
  THBT_CHECK(tg.shape == Shape{d} && tb.shape == Shape{d},
             "batch_norm: gamma/beta shape mismatch for ", shape_str(tx.shape));
  THBT_CHECK(state.running_mean.shape == Shape{d} && state.running_var.shape == Shape{d},
             "batch_norm: state dim mismatch for ", shape_str(tx.shape));

  std::vector<double> mean(d, 0.0), var(d, 0.0);
  if (training) {
    THBT_CHECK(T >= 1, "batch_norm: empty batch in training mode");
    for (int r = 0; r < T; ++r)
      for (int c = 0; c < d; ++c) mean[c] += tx.data[static_cast<size_t>(r) * d + c];
    for (int c = 0; c < d; ++c) mean[c] /= T;
    for (int r = 0; r < T; ++r)
      for (int c = 0; c < d; ++c) {
        double dv = tx.data[static_cast<size_t>(r) * d + c] - mean[c];
        var[c] += dv * dv;
      }
    for (int c = 0; c < d; ++c) var[c] /= T;
    const double m = state.momentum;
    if (state.steps_seen == 0) {
      for (int c = 0; c < d; ++c) {
        state.running_mean.data[c] = mean[c];
        state.running_var.data[c] = var[c];
      }
    } else {
      for (int c = 0; c < d; ++c) {
        state.running_mean.data[c] = m * state.running_mean.data[c] + (1.0 - m) * mean[c];
        state.running_var.data[c] = m * state.running_var.data[c] + (1.0 - m) * var[c];
      }
    }
    state.steps_seen++;
  } else {
    for (int c = 0; c < d; ++c) {
      mean[c] = state.running_mean.data[c];
      var[c] = state.running_var.data[c];
    }
  }

  Tensor out = Tensor::zeros(tx.shape);
  auto xhat = std::make_shared<std::vector<double>>(tx.data.size());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(d));
  for (int c = 0; c < d; ++c) (*inv_std)[c] = 1.0 / std::sqrt(var[c] + eps);
  for (int r = 0; r < T; ++r)
    for (int c = 0; c < d; ++c) {
      double xh = (tx.data[static_cast<size_t>(r) * d + c] - mean[c]) * (*inv_std)[c];
      (*xhat)[static_cast<size_t>(r) * d + c] = xh;
      out.data[static_cast<size_t>(r) * d + c] = tg.data[c] * xh + tb.data[c];
    }

  bool rg = t->requires_grad(x) || t->requires_grad(gamma) || t->requires_grad(beta);
  int ix = x.id, ig = gamma.id, ib = beta.id;
  return t->push(
      "batch_norm", std::move(out), {ix, ig, ib}, rg,
      [ix, ig, ib, T, d, xhat, inv_std, training](Tape& tp, int self) {
        const auto& g = tp.incoming(self);
        const auto& gammav = tp.value_of(ig).data;
        if (tp.node_requires_grad(ig)) {
          auto& gg = tp.grad_buffer(ig);
          for (int r = 0; r < T; ++r)
            for (int c = 0; c < d; ++c)
              gg[c] += g[static_cast<size_t>(r) * d + c] * (*xhat)[static_cast<size_t>(r) * d + c];
        }
        if (tp.node_requires_grad(ib)) {
          auto& gb = tp.grad_buffer(ib);
          for (int r = 0; r < T; ++r)
            for (int c = 0; c < d; ++c) gb[c] += g[static_cast<size_t>(r) * d + c];
        }
        if (tp.node_requires_grad(ix)) {
          auto& gx = tp.grad_buffer(ix);
          if (training) {
            for (int c = 0; c < d; ++c) {
              double sum_gy = 0.0, sum_gyx = 0.0;
              for (int r = 0; r < T; ++r) {
                double gy = g[static_cast<size_t>(r) * d + c] * gammav[c];
                sum_gy += gy;
                sum_gyx += gy * (*xhat)[static_cast<size_t>(r) * d + c];
              }
              for (int r = 0; r < T; ++r) {
                double gy = g[static_cast<size_t>(r) * d + c] * gammav[c];
                gx[static_cast<size_t>(r) * d + c] +=
                    (*inv_std)[c] * (gy - sum_gy / T -
                                     (*xhat)[static_cast<size_t>(r) * d + c] * sum_gyx / T);
              }
            }
          } else {
            for (int r = 0; r < T; ++r)
              for (int c = 0; c < d; ++c)
                gx[static_cast<size_t>(r) * d + c] +=
                    g[static_cast<size_t>(r) * d + c] * gammav[c] * (*inv_std)[c];
          }
        }
      });
}

/// Inverted dropout. The mask comes from a counter-based generator keyed on
/// (tape seed, node index), so a rebuilt identical graph reproduces it.
inline Var dropout(Var x, double p, bool training) {
  Tape* t = x.tape;
  THBT_CHECK(p >= 0.0 && p < 1.0, "dropout: rate must be in [0,1), got ", p);
  if (!training || p == 0.0) {
    // Identity pass-through keeps node numbering stable between modes.
    return scale(x, 1.0);
  }
  const Tensor& tx = t->val(x);
  uint64_t node_index = t->size();
  double keep = 1.0 - p;
  Tensor out = tx;
  auto mask = std::make_shared<std::vector<double>>(tx.data.size());
  for (size_t i = 0; i < out.data.size(); ++i) {
    double u = hash_uniform(t->dropout_seed(), node_index, i);
    (*mask)[i] = u < keep ? 1.0 / keep : 0.0;
    out.data[i] *= (*mask)[i];
  }
  int ix = x.id;
  return t->push("dropout", std::move(out), {ix}, t->requires_grad(x),
                 [ix, mask](Tape& tp, int self) {
                   if (!tp.node_requires_grad(ix)) return;
                   const auto& g = tp.incoming(self);
                   auto& gx = tp.grad_buffer(ix);
                   for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
                 });
}

/// Sum of all elements -> scalar.
inline Var sum_all(Var x) {
  Tape* t = x.tape;
  const Tensor& tx = t->val(x);
  double s = 0.0;
  for (double v : tx.data) s += v;
  int ix = x.id;
  int64_t n = tx.numel();
  return t->push("sum", Tensor::scalar(s), {ix}, t->requires_grad(x),
                 [ix, n](Tape& tp, int self) {
                   if (!tp.node_requires_grad(ix)) return;
                   double g = tp.incoming(self)[0];
                   auto& gx = tp.grad_buffer(ix);
                   for (int64_t i = 0; i < n; ++i) gx[i] += g;
                 });
}

/// Mean of all elements -> scalar.
inline Var mean_all(Var x) {
  const Tensor& tx = x.tape->val(x);
  THBT_CHECK(tx.numel() > 0, "mean: empty tensor");
  return scale(sum_all(x), 1.0 / static_cast<double>(tx.numel()));
}

/// Column means of a T x D tensor -> D vector.
inline Var mean_rows(Var x) {
  Tape* t = x.tape;
  const Tensor& tx = t->val(x);
  THBT_CHECK(tx.shape.size() == 2 && tx.shape[0] > 0, "mean_rows: need nonempty rank-2, got ",
             shape_str(tx.shape));
  int T = tx.shape[0], d = tx.shape[1];
  Tensor out = Tensor::zeros({d});
  for (int r = 0; r < T; ++r)
    for (int c = 0; c < d; ++c) out.data[c] += tx.data[static_cast<size_t>(r) * d + c];
  for (int c = 0; c < d; ++c) out.data[c] /= T;
  int ix = x.id;
  return t->push("mean_rows", std::move(out), {ix}, t->requires_grad(x),
                 [ix, T, d](Tape& tp, int self) {
                   if (!tp.node_requires_grad(ix)) return;
                   const auto& g = tp.incoming(self);
                   auto& gx = tp.grad_buffer(ix);
                   for (int r = 0; r < T; ++r)
                     for (int c = 0; c < d; ++c)
                       gx[static_cast<size_t>(r) * d + c] += g[c] / T;
                 });
}

/// Row lookup: out[i, :] = table[ids[i], :].
inline Var embedding(Var table, const std::vector<int>& ids) {
  Tape* t = table.tape;
  const Tensor& tt = t->val(table);
  THBT_CHECK(tt.shape.size() == 2, "embedding: table must be rank-2, got ",
             shape_str(tt.shape));
  int n = tt.shape[0], e = tt.shape[1];
  Tensor out = Tensor::zeros({static_cast<int>(ids.size()), e});
  for (size_t i = 0; i < ids.size(); ++i) {
    THBT_CHECK(ids[i] >= 0 && ids[i] < n, "embedding: id ", ids[i],
               " out of range [0,", n, ")");
    for (int c = 0; c < e; ++c)
      out.data[i * e + c] = tt.data[static_cast<size_t>(ids[i]) * e + c];
  }
  int it = table.id;
  auto ids_s = std::make_shared<std::vector<int>>(ids);
  return t->push("embedding", std::move(out), {it}, t->requires_grad(table),
                 [it, ids_s, e](Tape& tp, int self) {
                   if (!tp.node_requires_grad(it)) return;
                   const auto& g = tp.incoming(self);
                   auto& gt = tp.grad_buffer(it);
                   for (size_t i = 0; i < ids_s->size(); ++i)
                     for (int c = 0; c < e; ++c)
                       gt[static_cast<size_t>((*ids_s)[i]) * e + c] += g[i * e + c];
                 });
}

/// Per-row negative log-likelihood: out[t] = -log_softmax(logits)[t, ids[t]].
inline Var cross_entropy(Var logits, const std::vector<int>& ids) {
  Tape* t = logits.tape;
  const Tensor& tl = t->val(logits);
  THBT_CHECK(tl.shape.size() == 2, "cross_entropy: logits must be rank-2, got ",
             shape_str(tl.shape));
  int T = tl.shape[0], d = tl.shape[1];
  THBT_CHECK(static_cast<int>(ids.size()) == T, "cross_entropy: ", ids.size(),
             " targets for ", T, " rows");
  Tensor out = Tensor::zeros({T});
  auto probs = std::make_shared<std::vector<double>>(tl.data.size());
  for (int r = 0; r < T; ++r) {
    THBT_CHECK(ids[r] >= 0 && ids[r] < d, "cross_entropy: target ", ids[r],
               " out of range [0,", d, ")");
    const double* in = tl.data.data() + static_cast<size_t>(r) * d;
    double mx = in[0];
    for (int i = 1; i < d; ++i) mx = std::max(mx, in[i]);
    double sum = 0.0;
    for (int i = 0; i < d; ++i) sum += std::exp(in[i] - mx);
    double lse = mx + std::log(sum);
    for (int i = 0; i < d; ++i) (*probs)[static_cast<size_t>(r) * d + i] = std::exp(in[i] - lse);
    out.data[r] = lse - in[ids[r]];
  }
  int il = logits.id;
  auto ids_s = std::make_shared<std::vector<int>>(ids);
  return t->push("cross_entropy", std::move(out), {il}, t->requires_grad(logits),
                 [il, ids_s, T, d, probs](Tape& tp, int self) {
                   if (!tp.node_requires_grad(il)) return;
                   const auto& g = tp.incoming(self);
                   auto& gl = tp.grad_buffer(il);
                   for (int r = 0; r < T; ++r) {
                     for (int i = 0; i < d; ++i)
                       gl[static_cast<size_t>(r) * d + i] +=
                           g[r] * (*probs)[static_cast<size_t>(r) * d + i];
                     gl[static_cast<size_t>(r) * d + (*ids_s)[r]] -= g[r];
                   }
                 });
}

/// Frobenius norm -> scalar. Backward guards the zero-norm case.
inline Var l2_norm(Var x, double eps = 1e-12) {
  Tape* t = x.tape;
  const Tensor& tx = t->val(x);
  double sq = 0.0;
  for (double v : tx.data) sq += v * v;
  double nrm = std::sqrt(sq);
  int ix = x.id;
  return t->push("l2_norm", Tensor::scalar(nrm), {ix}, t->requires_grad(x),
                 [ix, eps](Tape& tp, int self) {
                   if (!tp.node_requires_grad(ix)) return;
                   double g = tp.incoming(self)[0];
                   double nrm2 = tp.value_of(self).data[0];
                   const auto& xv = tp.value_of(ix).data;
                   auto& gx = tp.grad_buffer(ix);
                   double inv = 1.0 / std::max(nrm2, eps);
                   for (size_t i = 0; i < xv.size(); ++i) gx[i] += g * xv[i] * inv;
                 });
}

/// Rows scaled to unit L2 norm (eps-guarded).
inline Var l2_normalize_rows(Var x, double eps = 1e-12) {
  Tape* t = x.tape;
  const Tensor& tx = t->val(x);
  int d = detail::last_dim(tx.shape);
  int64_t rows = detail::row_count(tx.shape);
  Tensor out = Tensor::zeros(tx.shape);
  auto norms = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    double sq = 0.0;
    for (int i = 0; i < d; ++i) sq += tx.data[r * d + i] * tx.data[r * d + i];
    double nrm = std::sqrt(sq) + eps;
    (*norms)[static_cast<size_t>(r)] = nrm;
    for (int i = 0; i < d; ++i) out.data[r * d + i] = tx.data[r * d + i] / nrm;
  }
  int ix = x.id;
  return t->push("l2_normalize_rows", std::move(out), {ix}, t->requires_grad(x),
                 [ix, rows, d, norms](Tape& tp, int self) {
                   if (!tp.node_requires_grad(ix)) return;
                   const auto& g = tp.incoming(self);
                   const auto& y = tp.value_of(self).data;
                   auto& gx = tp.grad_buffer(ix);
                   for (int64_t r = 0; r < rows; ++r) {
                     double dot = 0.0;
                     for (int i = 0; i < d; ++i) dot += g[r * d + i] * y[r * d + i];
                     double inv = 1.0 / (*norms)[static_cast<size_t>(r)];
                     for (int i = 0; i < d; ++i)
                       gx[r * d + i] += inv * (g[r * d + i] - y[r * d + i] * dot);
                   }
                 });
}

// ---------------------------------------------------------------------------
// Finite-difference oracle.
// ---------------------------------------------------------------------------

/// Max over elements of |analytic - numeric| / max(1, |numeric|) for a scalar
/// function of x built on a fresh tape per evaluation. f must be
/// deterministic.
inline double finite_diff_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x,
                                double eps = 1e-5, uint64_t tape_seed = 0) {
  THBT_CHECK(eps > 0.0, "finite_diff_check: eps must be positive, got ", eps);
  Tape tape(tape_seed);
  Var xv = tape.leaf(x, true);
  Var loss = f(tape, xv);
  THBT_CHECK(tape.val(loss).numel() == 1, "finite_diff_check: f must be scalar");
  THBT_CHECK(std::isfinite(tape.val(loss).data[0]),
             "finite_diff_check: non-finite loss value");
  tape.backward(loss);
  Tensor analytic = tape.grad(xv);

  auto eval = [&](const Tensor& pt) {
    Tape tp(tape_seed);
    Var v = tp.leaf(pt, false);
    Var l = f(tp, v);
    double out = tp.val(l).data[0];
    THBT_CHECK(std::isfinite(out), "finite_diff_check: non-finite function value");
    return out;
  };

  double worst = 0.0;
  Tensor pt = x;
  for (size_t i = 0; i < x.data.size(); ++i) {
    double orig = pt.data[i];
    pt.data[i] = orig + eps;
    double hi = eval(pt);
    pt.data[i] = orig - eps;
    double lo = eval(pt);
    pt.data[i] = orig;
    double numeric = (hi - lo) / (2.0 * eps);
    double err = std::abs(analytic.data[i] - numeric) / std::max(1.0, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace thubert
