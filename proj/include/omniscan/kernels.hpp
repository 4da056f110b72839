// Copyright 2026 The omniscan Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Forward kernels over plain tensors. The autodiff layer composes these and
// registers adjoints; inference paths may call them directly.
//
// MAC convention (reported to MacCounter): one per multiply in matmul/linear/
// conv1x1/depthwise taps, one per element of an elementwise product, one per
// accumulated input element in pooling. Additions, gathers and pointwise
// nonlinearities are free.

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "omniscan/errors.hpp"
#include "omniscan/mac_counter.hpp"
#include "omniscan/tensor.hpp"

namespace omniscan::kernel {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

// ---------------------------------------------------------------------------
// Broadcasting over singleton axes.

struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;  // 0 on broadcast axes
};

inline BroadcastPlan broadcast_plan(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<long>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<long>(r - b.size()));
  BroadcastPlan plan;
  plan.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] == pb[i] || pb[i] == 1) {
      plan.out[i] = pa[i];
    } else if (pa[i] == 1) {
      plan.out[i] = pb[i];
    } else {
      throw ShapeError("broadcast: " + shape_str(a) + " and " + shape_str(b) +
                       " differ on a non-singleton axis");
    }
  }
  const auto sa = row_major_strides(pa), sb = row_major_strides(pb);
  plan.stride_a.resize(r);
  plan.stride_b.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    plan.stride_a[i] = pa[i] == 1 ? 0 : sa[i];
    plan.stride_b[i] = pb[i] == 1 ? 0 : sb[i];
  }
  return plan;
}

// Calls row(out_offset, a_offset, b_offset, n, inc_a, inc_b) once per
// innermost row of the output.
template <class Row>
void for_each_row(const BroadcastPlan& p, Row&& row) {
  const std::size_t r = p.out.size();
  if (r == 0) {
    row(0, 0, 0, 1, 0, 0);
    return;
  }
  const std::size_t n = p.out[r - 1];
  const std::size_t outer = shape_numel(p.out) / n;
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < outer; ++o) {
    row(o * n, ia, ib, n, p.stride_a[r - 1], p.stride_b[r - 1]);
    for (std::size_t ax = r - 1; ax-- > 0;) {
      ia += p.stride_a[ax];
      ib += p.stride_b[ax];
      if (++idx[ax] < p.out[ax]) break;
      ia -= p.stride_a[ax] * p.out[ax];
      ib -= p.stride_b[ax] * p.out[ax];
      idx[ax] = 0;
    }
  }
}

enum class BinaryOp { kAdd, kSub, kMul };

template <class T>
Tensor<T> binary(BinaryOp op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() == b.shape()) {
    Tensor<T> out(a.shape());
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    T* po = out.ptr();
    const std::size_t n = a.size();
    switch (op) {
      case BinaryOp::kAdd:
        for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
        break;
      case BinaryOp::kSub:
        for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
        break;
      case BinaryOp::kMul:
        for (std::size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
        MacCounter::add(n);
        break;
    }
    return out;
  }
  const BroadcastPlan plan = broadcast_plan(a.shape(), b.shape());
  Tensor<T> out(plan.out);
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* po = out.ptr();
  for_each_row(plan, [&](std::size_t o, std::size_t ia, std::size_t ib,
                         std::size_t n, std::size_t sa, std::size_t sb) {
    for (std::size_t i = 0; i < n; ++i) {
      const T x = pa[ia + i * sa], y = pb[ib + i * sb];
      po[o + i] = op == BinaryOp::kAdd   ? x + y
                  : op == BinaryOp::kSub ? x - y
                                         : x * y;
    }
  });
  if (op == BinaryOp::kMul) MacCounter::add(out.size());
  return out;
}

// Sums g (shaped like a broadcast result) back down to `target`.
template <class T>
Tensor<T> reduce_to(const Tensor<T>& g, const Shape& target) {
  if (g.shape() == target) return g;
  const BroadcastPlan plan = broadcast_plan(g.shape(), target);
  if (plan.out != g.shape())
    throw ShapeError("reduce_to: " + shape_str(target) +
                     " does not broadcast to " + shape_str(g.shape()));
  Tensor<T> out(target);
  const T* pg = g.ptr();
  T* po = out.ptr();
  for_each_row(plan, [&](std::size_t o, std::size_t, std::size_t ib,
                         std::size_t n, std::size_t, std::size_t sb) {
    for (std::size_t i = 0; i < n; ++i) po[ib + i * sb] += pg[o + i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Pointwise functions.

template <class T>
T softplus(T x) {
  return x > T(30) ? x : std::log1p(std::exp(x));
}

template <class T>
T sigmoid(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <class T>
T silu(T x) {
  return x * sigmoid(x);
}

template <class T, class F>
Tensor<T> map(const Tensor<T>& a, F&& f) {
  Tensor<T> out(a.shape());
  const T* pa = a.ptr();
  T* po = out.ptr();
  for (std::size_t i = 0; i < a.size(); ++i) po[i] = f(pa[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Products.

// a: (..., M, K), b: (K, N) shared or (..., K, N) with matching batch axes.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul: operands need rank >= 2, got " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t M = a.dim(a.rank() - 2), K = a.dim(a.rank() - 1);
  const std::size_t Kb = b.dim(b.rank() - 2), N = b.dim(b.rank() - 1);
  if (K != Kb)
    throw ShapeError("matmul: inner dimensions " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  if (!batch_b.empty() && batch_b != batch_a)
    throw ShapeError("matmul: batch axes " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const std::size_t batches = shape_numel(batch_a);
  Shape out_shape = batch_a;
  out_shape.push_back(M);
  out_shape.push_back(N);
  Tensor<T> out(out_shape);
  for (std::size_t i = 0; i < batches; ++i) {
    CMapMat<T> A(a.ptr() + i * M * K, M, K);
    CMapMat<T> B(b.ptr() + (batch_b.empty() ? 0 : i * K * N), K, N);
    MapMat<T> C(out.ptr() + i * M * N, M, N);
    C.noalias() = A * B;
  }
  MacCounter::add(std::uint64_t{batches} * M * K * N);
  return out;
}

// y[..., n] = sum_k x[..., k] * w[n, k] + bias[n]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w,
                 const Tensor<T>* bias) {
  if (w.rank() != 2 || x.rank() < 1 || x.dim(x.rank() - 1) != w.dim(1))
    throw ShapeError("linear: input " + shape_str(x.shape()) +
                     " incompatible with weight " + shape_str(w.shape()));
  const std::size_t K = w.dim(1), N = w.dim(0), P = x.size() / K;
  if (bias && (bias->rank() != 1 || bias->dim(0) != N))
    throw ShapeError("linear: bias shape " + shape_str(bias->shape()));
  Shape out_shape = x.shape();
  out_shape.back() = N;
  Tensor<T> out(out_shape);
  CMapMat<T> X(x.ptr(), P, K);
  CMapMat<T> W(w.ptr(), N, K);
  MapMat<T> Y(out.ptr(), P, N);
  Y.noalias() = X * W.transpose();
  if (bias) {
    T* po = out.ptr();
    const T* pb = bias->ptr();
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t n = 0; n < N; ++n) po[p * N + n] += pb[n];
  }
  MacCounter::add(std::uint64_t{P} * K * N);
  return out;
}

// x: (B, Cin, F, T), w: (Cout, Cin), bias: (Cout)
template <class T>
Tensor<T> conv1x1(const Tensor<T>& x, const Tensor<T>& w,
                  const Tensor<T>* bias) {
  if (x.rank() != 4 || w.rank() != 2 || w.dim(1) != x.dim(1))
    throw ShapeError("conv1x1: input " + shape_str(x.shape()) +
                     " incompatible with weight " + shape_str(w.shape()));
  const std::size_t B = x.dim(0), Ci = x.dim(1), Co = w.dim(0);
  const std::size_t S = x.dim(2) * x.dim(3);
  if (bias && (bias->rank() != 1 || bias->dim(0) != Co))
    throw ShapeError("conv1x1: bias shape " + shape_str(bias->shape()));
  Tensor<T> out({B, Co, x.dim(2), x.dim(3)});
  CMapMat<T> W(w.ptr(), Co, Ci);
  for (std::size_t b = 0; b < B; ++b) {
    CMapMat<T> X(x.ptr() + b * Ci * S, Ci, S);
    MapMat<T> Y(out.ptr() + b * Co * S, Co, S);
    Y.noalias() = W * X;
    if (bias)
      for (std::size_t o = 0; o < Co; ++o) Y.row(o).array() += (*bias)[o];
  }
  MacCounter::add(std::uint64_t{B} * S * Co * Ci);
  return out;
}

// x: (N, L, E); w: (E, K); causal with implicit zero left-padding:
// y[t] = sum_k w[k] x[t - (K-1) + k] + b. Every tap is evaluated (padded taps
// multiply zero), so the MAC count is exactly N*L*E*K.
template <class T>
Tensor<T> causal_depthwise_conv(const Tensor<T>& x, const Tensor<T>& w,
                                const Tensor<T>& bias) {
  if (x.rank() != 3 || w.rank() != 2 || w.dim(0) != x.dim(2) ||
      bias.rank() != 1 || bias.dim(0) != x.dim(2))
    throw ShapeError("causal_depthwise_conv: input " + shape_str(x.shape()) +
                     " weight " + shape_str(w.shape()));
  const std::size_t N = x.dim(0), L = x.dim(1), E = x.dim(2), K = w.dim(1);
  Tensor<T> out(x.shape());
  const std::vector<T> zeros(E, T(0));
  for (std::size_t n = 0; n < N; ++n) {
    const T* px = x.ptr() + n * L * E;
    T* py = out.ptr() + n * L * E;
    for (std::size_t t = 0; t < L; ++t) {
      T* yt = py + t * E;
      for (std::size_t e = 0; e < E; ++e) yt[e] = bias[e];
      for (std::size_t k = 0; k < K; ++k) {
        const T* xs = t + k + 1 >= K ? px + (t + k + 1 - K) * E : zeros.data();
        for (std::size_t e = 0; e < E; ++e) yt[e] += w[e * K + k] * xs[e];
      }
    }
  }
  MacCounter::add(std::uint64_t{N} * L * E * K);
  return out;
}

// ---------------------------------------------------------------------------
// Axis manipulation.

inline void check_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size())
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " invalid for shape " + shape_str(s));
}

template <class T>
Tensor<T> flip(const Tensor<T>& x, std::size_t axis) {
  check_axis(x.shape(), axis, "flip");
  const std::size_t n = x.dim(axis);
  const std::size_t inner = shape_numel(Shape(x.shape().begin() + axis + 1,
                                              x.shape().end()));
  const std::size_t outer = x.size() / (n * inner);
  Tensor<T> out(x.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(x.ptr() + (o * n + i) * inner, inner,
                  out.ptr() + (o * n + (n - 1 - i)) * inner);
  return out;
}

inline void check_perm(const std::vector<std::size_t>& perm, std::size_t r) {
  std::vector<bool> seen(r, false);
  if (perm.size() != r)
    throw ShapeError("transpose: permutation rank mismatch");
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) throw ShapeError("transpose: invalid permutation");
    seen[p] = true;
  }
}

// out axis i is input axis perm[i].
template <class T>
Tensor<T> transpose(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  check_perm(perm, x.rank());
  const std::size_t r = x.rank();
  Shape out_shape(r);
  const auto in_strides = x.strides();
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.dim(perm[i]);
    src_stride[i] = in_strides[perm[i]];
  }
  Tensor<T> out(out_shape);
  if (r == 0) {
    out[0] = x[0];
    return out;
  }
  BroadcastPlan plan{out_shape, src_stride, src_stride};
  const T* px = x.ptr();
  T* po = out.ptr();
  for_each_row(plan, [&](std::size_t o, std::size_t ia, std::size_t,
                         std::size_t n, std::size_t sa, std::size_t) {
    for (std::size_t i = 0; i < n; ++i) po[o + i] = px[ia + i * sa];
  });
  return out;
}

template <class T>
Tensor<T> stack(std::span<const Tensor<T>* const> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("stack: no inputs");
  const Shape& s = parts[0]->shape();
  if (axis > s.size()) throw ShapeError("stack: axis out of range");
  for (const auto* p : parts)
    if (p->shape() != s)
      throw ShapeError("stack: shape " + shape_str(p->shape()) + " vs " +
                       shape_str(s));
  Shape out_shape = s;
  out_shape.insert(out_shape.begin() + static_cast<long>(axis), parts.size());
  const std::size_t inner =
      shape_numel(Shape(s.begin() + static_cast<long>(axis), s.end()));
  const std::size_t outer = shape_numel(s) / inner;
  Tensor<T> out(out_shape);
  const std::size_t k = parts.size();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < k; ++j)
      std::copy_n(parts[j]->ptr() + o * inner, inner,
                  out.ptr() + (o * k + j) * inner);
  return out;
}

// Reduces (removes) one axis.
template <class T>
Tensor<T> sum_axis(const Tensor<T>& x, std::size_t axis) {
  check_axis(x.shape(), axis, "sum");
  const std::size_t n = x.dim(axis);
  const std::size_t inner = shape_numel(Shape(x.shape().begin() + axis + 1,
                                              x.shape().end()));
  const std::size_t outer = x.size() / (n * inner);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  Tensor<T> out(out_shape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < n; ++i) {
      const T* src = x.ptr() + (o * n + i) * inner;
      T* dst = out.ptr() + o * inner;
      for (std::size_t j = 0; j < inner; ++j) dst[j] += src[j];
    }
  return out;
}

template <class T>
std::vector<Tensor<T>> split(const Tensor<T>& x, std::size_t axis,
                             std::size_t parts) {
  check_axis(x.shape(), axis, "split");
  const std::size_t n = x.dim(axis);
  if (parts == 0 || n % parts != 0)
    throw ShapeError("split: " + std::to_string(parts) +
                     " parts do not divide axis length " + std::to_string(n));
  const std::size_t m = n / parts;
  const std::size_t inner = shape_numel(Shape(x.shape().begin() + axis + 1,
                                              x.shape().end()));
  const std::size_t outer = x.size() / (n * inner);
  Shape part_shape = x.shape();
  part_shape[axis] = m;
  std::vector<Tensor<T>> out;
  out.reserve(parts);
  for (std::size_t p = 0; p < parts; ++p) {
    Tensor<T> t(part_shape);
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(x.ptr() + (o * n + p * m) * inner, m * inner,
                  t.ptr() + o * m * inner);
    out.push_back(std::move(t));
  }
  return out;
}

// (B, C, F, T) -> (B, 1, C), mean over the (F, T) grid.
template <class T>
Tensor<T> mean_pool_ft(const Tensor<T>& x) {
  if (x.rank() != 4)
    throw ShapeError("mean_pool_ft: expected (B, C, F, T), got " +
                     shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3);
  Tensor<T> out({B, 1, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      const T* p = x.ptr() + (b * C + c) * S;
      T acc = 0;
      for (std::size_t i = 0; i < S; ++i) acc += p[i];
      out[b * C + c] = acc / static_cast<T>(S);
    }
  MacCounter::add(x.size());
  return out;
}

// out[i] = x[index[i]]
template <class T>
Tensor<T> gather(const Tensor<T>& x, std::span<const std::uint32_t> index,
                 Shape out_shape) {
  Tensor<T> out(std::move(out_shape));
  if (index.size() != out.size())
    throw ShapeError("gather: index length does not match output shape");
  const T* px = x.ptr();
  T* po = out.ptr();
  for (std::size_t i = 0; i < index.size(); ++i) po[i] = px[index[i]];
  return out;
}

}  // namespace omniscan::kernel
