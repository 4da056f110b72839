// Copyright 2026 The omniscan Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Reverse-mode differentiation over a closed set of tensor operations.
//
// A Var pairs an immutable tensor value with an optional node on a Tape. Ops
// whose inputs all lack a node (constants, or a paused tape) produce plain
// values and record nothing, so inference does not retain intermediates.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "omniscan/errors.hpp"
#include "omniscan/kernels.hpp"
#include "omniscan/tensor.hpp"
#include "omniscan/vmath.hpp"

namespace omniscan {

template <std::floating_point T>
class Tape;

inline constexpr std::size_t kNoNode = std::numeric_limits<std::size_t>::max();

template <std::floating_point T>
class Var {
 public:
  Var() : value_(std::make_shared<const Tensor<T>>()) {}
  explicit Var(Tensor<T> v)
      : value_(std::make_shared<const Tensor<T>>(std::move(v))) {}
  Var(std::shared_ptr<const Tensor<T>> v, Tape<T>* tape, std::size_t node)
      : value_(std::move(v)), tape_(tape), node_(node) {}

  const Tensor<T>& value() const { return *value_; }
  const std::shared_ptr<const Tensor<T>>& value_ptr() const { return value_; }
  const Shape& shape() const { return value_->shape(); }
  std::size_t dim(std::size_t axis) const { return value_->dim(axis); }
  Tape<T>* tape() const { return tape_; }
  std::size_t node() const { return node_; }
  bool requires_grad() const { return node_ != kNoNode; }

 private:
  std::shared_ptr<const Tensor<T>> value_;
  Tape<T>* tape_ = nullptr;
  std::size_t node_ = kNoNode;
};

template <std::floating_point T>
Var<T> constant(Tensor<T> v) {
  return Var<T>(std::move(v));
}

template <std::floating_point T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor<T>&)>;

  struct Node {
    std::string_view op;
    Shape shape;
    std::vector<std::size_t> inputs;
    Backward backward;  // empty for leaves
    std::optional<Tensor<T>> grad;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> leaf(Tensor<T> value) {
    return leaf(std::make_shared<const Tensor<T>>(std::move(value)));
  }
  Var<T> leaf(std::shared_ptr<const Tensor<T>> value) {
    nodes_.push_back(Node{"leaf", value->shape(), {}, {}, std::nullopt});
    return Var<T>(std::move(value), this, nodes_.size() - 1);
  }

  bool recording() const { return recording_; }

  // RAII scope during which ops record nothing.
  class Pause {
   public:
    explicit Pause(Tape& t) : tape_(t), prev_(t.recording_) {
      t.recording_ = false;
    }
    ~Pause() { tape_.recording_ = prev_; }
    Pause(const Pause&) = delete;
    Pause& operator=(const Pause&) = delete;

   private:
    Tape& tape_;
    bool prev_;
  };

  std::size_t record(std::string_view op, Shape shape,
                     std::vector<std::size_t> inputs, Backward backward) {
    for (std::size_t in : inputs)
      if (in >= nodes_.size())
        throw ContractError("tape: input node does not precede op");
    nodes_.push_back(Node{op, std::move(shape), std::move(inputs),
                          std::move(backward), std::nullopt});
    return nodes_.size() - 1;
  }

  Tensor<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.grad) n.grad.emplace(n.shape);
    return *n.grad;
  }

  void accumulate(std::size_t id, Tensor<T>&& g) {
    Node& n = nodes_.at(id);
    if (g.shape() != n.shape)
      throw ShapeError(std::string("tape: gradient shape ") +
                       shape_str(g.shape()) + " for node '" +
                       std::string(n.op) + "' of shape " + shape_str(n.shape));
    if (!n.grad) {
      n.grad.emplace(std::move(g));
      return;
    }
    T* dst = n.grad->ptr();
    const T* src = g.ptr();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
  }
  void accumulate(std::size_t id, const Tensor<T>& g) {
    accumulate(id, Tensor<T>(g));
  }

  // Reverse sweep from a scalar loss. With keep_intermediate = false the
  // gradient buffers of non-leaf nodes are released once consumed.
  void backward(const Var<T>& loss, bool keep_intermediate = true) {
    if (loss.tape() != this || !loss.requires_grad())
      throw ContractError("backward: loss is not recorded on this tape");
    if (loss.value().size() != 1)
      throw ContractError("backward: loss must be scalar, got shape " +
                          shape_str(loss.shape()));
    accumulate(loss.node(), Tensor<T>(loss.shape(), T(1)));
    for (std::size_t i = loss.node() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.grad || !n.backward) continue;
      n.backward(*this, *n.grad);
      if (!keep_intermediate) {
        n.grad.reset();
        n.backward = nullptr;  // drops the values saved for this op
      }
    }
  }

  const Tensor<T>* grad(const Var<T>& v) const {
    if (v.tape() != this || !v.requires_grad()) return nullptr;
    const auto& g = nodes_[v.node()].grad;
    return g ? &*g : nullptr;
  }

  Tensor<T> grad_or_zero(const Var<T>& v) const {
    const Tensor<T>* g = grad(v);
    return g ? *g : Tensor<T>(v.shape());
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }

  bool topologically_ordered() const {
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      for (std::size_t in : nodes_[i].inputs)
        if (in >= i) return false;
    return true;
  }

 private:
  std::vector<Node> nodes_;
  bool recording_ = true;
};

namespace detail {

template <class T>
Tape<T>* common_tape(std::initializer_list<const Var<T>*> vars) {
  Tape<T>* tape = nullptr;
  for (const Var<T>* v : vars) {
    if (!v->requires_grad()) continue;
    if (tape && tape != v->tape())
      throw ContractError("autodiff: inputs recorded on different tapes");
    tape = v->tape();
  }
  return tape && tape->recording() ? tape : nullptr;
}

template <class T>
void check_finite(std::string_view op, const Tensor<T>& value) {
#ifndef NDEBUG
  if (!value.all_finite())
    throw NumericError("non-finite output from op '" + std::string(op) + "'");
#else
  (void)op;
  (void)value;
#endif
}

// Wraps a computed value into a Var, recording `backward` when any input
// requires grad.
template <class T, class F>
Var<T> finish(std::string_view op, Tensor<T> value,
              std::initializer_list<const Var<T>*> inputs, F&& backward) {
  check_finite(op, value);
  auto ptr = std::make_shared<const Tensor<T>>(std::move(value));
  Tape<T>* tape = common_tape<T>(inputs);
  if (!tape) return Var<T>(std::move(ptr), nullptr, kNoNode);
  std::vector<std::size_t> ids;
  for (const Var<T>* v : inputs)
    if (v->requires_grad()) ids.push_back(v->node());
  const std::size_t id = tape->record(op, ptr->shape(), std::move(ids),
                                      std::forward<F>(backward));
  return Var<T>(std::move(ptr), tape, id);
}

// Same for ops with a variable number of inputs.
template <class T, class F>
Var<T> finish_n(std::string_view op, Tensor<T> value,
                std::span<const Var<T>> inputs, F&& backward) {
  check_finite(op, value);
  auto ptr = std::make_shared<const Tensor<T>>(std::move(value));
  Tape<T>* tape = nullptr;
  std::vector<std::size_t> ids;
  for (const Var<T>& v : inputs) {
    if (!v.requires_grad()) continue;
    if (tape && tape != v.tape())
      throw ContractError("autodiff: inputs recorded on different tapes");
    tape = v.tape();
    ids.push_back(v.node());
  }
  if (!tape || !tape->recording())
    return Var<T>(std::move(ptr), nullptr, kNoNode);
  const std::size_t id = tape->record(op, ptr->shape(), std::move(ids),
                                      std::forward<F>(backward));
  return Var<T>(std::move(ptr), tape, id);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with singleton broadcasting.

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  Tensor<T> out = kernel::binary(kernel::BinaryOp::kAdd, a.value(), b.value());
  return detail::finish<T>(
      "add", std::move(out), {&a, &b},
      [na = a.node(), nb = b.node(), sa = a.shape(), sb = b.shape()](
          Tape<T>& tape, const Tensor<T>& g) {
        if (na != kNoNode) tape.accumulate(na, kernel::reduce_to(g, sa));
        if (nb != kNoNode) tape.accumulate(nb, kernel::reduce_to(g, sb));
      });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  Tensor<T> out = kernel::binary(kernel::BinaryOp::kSub, a.value(), b.value());
  return detail::finish<T>(
      "sub", std::move(out), {&a, &b},
      [na = a.node(), nb = b.node(), sa = a.shape(), sb = b.shape()](
          Tape<T>& tape, const Tensor<T>& g) {
        if (na != kNoNode) tape.accumulate(na, kernel::reduce_to(g, sa));
        if (nb != kNoNode) {
          Tensor<T> gb = kernel::reduce_to(g, sb);
          for (auto& v : gb.data()) v = -v;
          tape.accumulate(nb, std::move(gb));
        }
      });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  Tensor<T> out = kernel::binary(kernel::BinaryOp::kMul, a.value(), b.value());
  return detail::finish<T>(
      "mul", std::move(out), {&a, &b},
      [na = a.node(), nb = b.node(), va = a.value_ptr(), vb = b.value_ptr()](
          Tape<T>& tape, const Tensor<T>& g) {
        if (na != kNoNode)
          tape.accumulate(na, kernel::reduce_to(
                                  kernel::binary(kernel::BinaryOp::kMul, g, *vb),
                                  va->shape()));
        if (nb != kNoNode)
          tape.accumulate(nb, kernel::reduce_to(
                                  kernel::binary(kernel::BinaryOp::kMul, g, *va),
                                  vb->shape()));
      });
}

template <class T>
Var<T> scale(const Var<T>& a, T c) {
  Tensor<T> out = kernel::map(a.value(), [c](T x) { return c * x; });
  return detail::finish<T>("scale", std::move(out), {&a},
                           [na = a.node(), c](Tape<T>& tape, const Tensor<T>& g) {
                             tape.accumulate(
                                 na, kernel::map(g, [c](T x) { return c * x; }));
                           });
}

// ---------------------------------------------------------------------------
// Pointwise unary ops.

template <class T>
Var<T> negate(const Var<T>& a) {
  return scale(a, T(-1));
}

namespace detail {

template <class T, class F>
Tensor<T> apply_array(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  f(a.ptr(), out.ptr(), a.size());
  return out;
}

}  // namespace detail

template <class T>
Var<T> exp(const Var<T>& a) {
  auto f = [](const T* i, T* o, std::size_t n) { vmath::exp(i, o, n); };
  return detail::finish<T>(
      "exp", detail::apply_array(a.value(), f), {&a},
      [na = a.node(), va = a.value_ptr(), f](Tape<T>& tape,
                                             const Tensor<T>& g) {
        Tensor<T> gx = detail::apply_array(*va, f);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] *= g[i];
        tape.accumulate(na, std::move(gx));
      });
}

template <class T>
Var<T> softplus(const Var<T>& a) {
  auto f = [](const T* i, T* o, std::size_t n) { vmath::softplus(i, o, n); };
  return detail::finish<T>(
      "softplus", detail::apply_array(a.value(), f), {&a},
      [na = a.node(), va = a.value_ptr()](Tape<T>& tape, const Tensor<T>& g) {
        Tensor<T> gx(g.shape());
        vmath::sigmoid(va->ptr(), gx.ptr(), gx.size());
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] *= g[i];
        tape.accumulate(na, std::move(gx));
      });
}

template <class T>
Var<T> sigmoid(const Var<T>& a) {
  auto f = [](const T* i, T* o, std::size_t n) { vmath::sigmoid(i, o, n); };
  Tensor<T> out = detail::apply_array(a.value(), f);
  auto saved = std::make_shared<const Tensor<T>>(out);
  return detail::finish<T>(
      "sigmoid", std::move(out), {&a},
      [na = a.node(), saved](Tape<T>& tape, const Tensor<T>& g) {
        Tensor<T> gx(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T s = (*saved)[i];
          gx[i] = g[i] * s * (T(1) - s);
        }
        tape.accumulate(na, std::move(gx));
      });
}

template <class T>
Var<T> silu(const Var<T>& a) {
  auto f = [](const T* i, T* o, std::size_t n) { vmath::silu(i, o, n); };
  return detail::finish<T>(
      "silu", detail::apply_array(a.value(), f), {&a},
      [na = a.node(), va = a.value_ptr()](Tape<T>& tape, const Tensor<T>& g) {
        Tensor<T> gx(g.shape());
        vmath::sigmoid(va->ptr(), gx.ptr(), gx.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T x = (*va)[i];
          const T s = gx[i];
          gx[i] = g[i] * s * (T(1) + x * (T(1) - s));
        }
        tape.accumulate(na, std::move(gx));
      });
}

// ---------------------------------------------------------------------------
// Products.

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  Tensor<T> out = kernel::matmul(a.value(), b.value());
  return detail::finish<T>(
      "matmul", std::move(out), {&a, &b},
      [na = a.node(), nb = b.node(), va = a.value_ptr(), vb = b.value_ptr()](
          Tape<T>& tape, const Tensor<T>& g) {
        using kernel::CMapMat;
        using kernel::MapMat;
        const Tensor<T>& A = *va;
        const Tensor<T>& B = *vb;
        const std::size_t M = A.dim(A.rank() - 2), K = A.dim(A.rank() - 1);
        const std::size_t N = B.dim(B.rank() - 1);
        const std::size_t batches = A.size() / (M * K);
        const bool shared_b = B.rank() == 2;
        if (na != kNoNode) {
          Tensor<T> ga(A.shape());
          for (std::size_t i = 0; i < batches; ++i) {
            CMapMat<T> G(g.ptr() + i * M * N, M, N);
            CMapMat<T> Bm(B.ptr() + (shared_b ? 0 : i * K * N), K, N);
            MapMat<T>(ga.ptr() + i * M * K, M, K).noalias() =
                G * Bm.transpose();
          }
          tape.accumulate(na, std::move(ga));
        }
        if (nb != kNoNode) {
          Tensor<T> gb(B.shape());
          for (std::size_t i = 0; i < batches; ++i) {
            CMapMat<T> G(g.ptr() + i * M * N, M, N);
            CMapMat<T> Am(A.ptr() + i * M * K, M, K);
            MapMat<T>(gb.ptr() + (shared_b ? 0 : i * K * N), K, N).noalias() +=
                Am.transpose() * G;
          }
          tape.accumulate(nb, std::move(gb));
        }
      });
}

// y[..., n] = sum_k x[..., k] w[n, k] (+ bias[n])
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w) {
  Tensor<T> out = kernel::linear<T>(x.value(), w.value(), nullptr);
  return detail::finish<T>(
      "linear", std::move(out), {&x, &w},
      [nx = x.node(), nw = w.node(), vx = x.value_ptr(), vw = w.value_ptr()](
          Tape<T>& tape, const Tensor<T>& g) {
        using kernel::CMapMat;
        using kernel::MapMat;
        const std::size_t N = vw->dim(0), K = vw->dim(1), P = vx->size() / K;
        CMapMat<T> G(g.ptr(), P, N);
        if (nx != kNoNode) {
          Tensor<T> gx(vx->shape());
          MapMat<T>(gx.ptr(), P, K).noalias() = G * CMapMat<T>(vw->ptr(), N, K);
          tape.accumulate(nx, std::move(gx));
        }
        if (nw != kNoNode) {
          Tensor<T> gw(vw->shape());
          MapMat<T>(gw.ptr(), N, K).noalias() =
              G.transpose() * CMapMat<T>(vx->ptr(), P, K);
          tape.accumulate(nw, std::move(gw));
        }
      });
}

template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  Tensor<T> out = kernel::linear(x.value(), w.value(), &bias.value());
  return detail::finish<T>(
      "linear", std::move(out), {&x, &w, &bias},
      [nx = x.node(), nw = w.node(), nb = bias.node(), vx = x.value_ptr(),
       vw = w.value_ptr()](Tape<T>& tape, const Tensor<T>& g) {
        using kernel::CMapMat;
        using kernel::MapMat;
        const std::size_t N = vw->dim(0), K = vw->dim(1), P = vx->size() / K;
        CMapMat<T> G(g.ptr(), P, N);
        if (nx != kNoNode) {
          Tensor<T> gx(vx->shape());
          MapMat<T>(gx.ptr(), P, K).noalias() = G * CMapMat<T>(vw->ptr(), N, K);
          tape.accumulate(nx, std::move(gx));
        }
        if (nw != kNoNode) {
          Tensor<T> gw(vw->shape());
          MapMat<T>(gw.ptr(), N, K).noalias() =
              G.transpose() * CMapMat<T>(vx->ptr(), P, K);
          tape.accumulate(nw, std::move(gw));
        }
        if (nb != kNoNode) {
          Tensor<T> gb({N});
          for (std::size_t p = 0; p < P; ++p)
            for (std::size_t n = 0; n < N; ++n) gb[n] += g[p * N + n];
          tape.accumulate(nb, std::move(gb));
        }
      });
}

template <class T>
Var<T> conv1x1(const Var<T>& x, const Var<T>& w, const Var<T>& bias) {
  Tensor<T> out = kernel::conv1x1(x.value(), w.value(), &bias.value());
  return detail::finish<T>(
      "conv1x1", std::move(out), {&x, &w, &bias},
      [nx = x.node(), nw = w.node(), nb = bias.node(), vx = x.value_ptr(),
       vw = w.value_ptr()](Tape<T>& tape, const Tensor<T>& g) {
        using kernel::CMapMat;
        using kernel::MapMat;
        const std::size_t B = vx->dim(0), Ci = vx->dim(1), Co = vw->dim(0);
        const std::size_t S = vx->dim(2) * vx->dim(3);
        CMapMat<T> W(vw->ptr(), Co, Ci);
        Tensor<T> gx, gw, gb;
        if (nx != kNoNode) gx = Tensor<T>(vx->shape());
        if (nw != kNoNode) gw = Tensor<T>(vw->shape());
        if (nb != kNoNode) gb = Tensor<T>({Co});
        for (std::size_t b = 0; b < B; ++b) {
          CMapMat<T> G(g.ptr() + b * Co * S, Co, S);
          if (nx != kNoNode)
            MapMat<T>(gx.ptr() + b * Ci * S, Ci, S).noalias() =
                W.transpose() * G;
          if (nw != kNoNode)
            MapMat<T>(gw.ptr(), Co, Ci).noalias() +=
                G * CMapMat<T>(vx->ptr() + b * Ci * S, Ci, S).transpose();
          // Plain loop: Eigen's vectorized sum peels to the buffer's
          // alignment, so its rounding would depend on the heap address.
          if (nb != kNoNode)
            for (std::size_t o = 0; o < Co; ++o) {
              const T* row = g.ptr() + (b * Co + o) * S;
              T acc = 0;
              for (std::size_t k = 0; k < S; ++k) acc += row[k];
              gb[o] += acc;
            }
        }
        if (nx != kNoNode) tape.accumulate(nx, std::move(gx));
        if (nw != kNoNode) tape.accumulate(nw, std::move(gw));
        if (nb != kNoNode) tape.accumulate(nb, std::move(gb));
      });
}

template <class T>
Var<T> causal_depthwise_conv(const Var<T>& x, const Var<T>& w,
                             const Var<T>& bias) {
  Tensor<T> out = kernel::causal_depthwise_conv(x.value(), w.value(),
                                                bias.value());
  return detail::finish<T>(
      "causal_dwconv", std::move(out), {&x, &w, &bias},
      [nx = x.node(), nw = w.node(), nb = bias.node(), vx = x.value_ptr(),
       vw = w.value_ptr()](Tape<T>& tape, const Tensor<T>& g) {
        const std::size_t N = vx->dim(0), L = vx->dim(1), E = vx->dim(2);
        const std::size_t K = vw->dim(1);
        Tensor<T> gx(vx->shape()), gw(vw->shape()), gb({E});
        const T* pw = vw->ptr();
        for (std::size_t n = 0; n < N; ++n) {
          const T* px = vx->ptr() + n * L * E;
          const T* pg = g.ptr() + n * L * E;
          T* pgx = gx.ptr() + n * L * E;
          for (std::size_t t = 0; t < L; ++t) {
            const T* gt = pg + t * E;
            for (std::size_t e = 0; e < E; ++e) gb[e] += gt[e];
            const std::size_t k0 = t + 1 >= K ? 0 : K - 1 - t;
            for (std::size_t k = k0; k < K; ++k) {
              const std::size_t s = (t + k + 1 - K) * E;
              for (std::size_t e = 0; e < E; ++e) {
                pgx[s + e] += pw[e * K + k] * gt[e];
                gw[e * K + k] += gt[e] * px[s + e];
              }
            }
          }
        }
        if (nx != kNoNode) tape.accumulate(nx, std::move(gx));
        if (nw != kNoNode) tape.accumulate(nw, std::move(gw));
        if (nb != kNoNode) tape.accumulate(nb, std::move(gb));
      });
}

// ---------------------------------------------------------------------------
// Axis ops.

template <class T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  return detail::finish<T>(
      "reshape", std::move(out), {&a},
      [na = a.node(), s = a.shape()](Tape<T>& tape, const Tensor<T>& g) {
        tape.accumulate(na, g.reshaped(s));
      });
}

template <class T>
Var<T> flip(const Var<T>& a, std::size_t axis) {
  Tensor<T> out = kernel::flip(a.value(), axis);
  return detail::finish<T>(
      "flip", std::move(out), {&a},
      [na = a.node(), axis](Tape<T>& tape, const Tensor<T>& g) {
        tape.accumulate(na, kernel::flip(g, axis));
      });
}

template <class T>
Var<T> transpose(const Var<T>& a, std::vector<std::size_t> perm) {
  Tensor<T> out = kernel::transpose(a.value(), perm);
  std::vector<std::size_t> inverse(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inverse[perm[i]] = i;
  return detail::finish<T>(
      "transpose", std::move(out), {&a},
      [na = a.node(), inverse](Tape<T>& tape, const Tensor<T>& g) {
        tape.accumulate(na, kernel::transpose(g, inverse));
      });
}

template <class T>
Var<T> stack(std::span<const Var<T>> parts, std::size_t axis = 0) {
  std::vector<const Tensor<T>*> values;
  for (const auto& p : parts) values.push_back(&p.value());
  Tensor<T> out = kernel::stack<T>(values, axis);
  std::vector<std::size_t> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::finish_n<T>(
      "stack", std::move(out), parts,
      [nodes, axis](Tape<T>& tape, const Tensor<T>& g) {
        auto pieces = kernel::split(g, axis, nodes.size());
        for (std::size_t i = 0; i < nodes.size(); ++i) {
          if (nodes[i] == kNoNode) continue;
          Shape s = pieces[i].shape();
          s.erase(s.begin() + static_cast<long>(axis));
          tape.accumulate(nodes[i], std::move(pieces[i]).reshaped(s));
        }
      });
}

template <class T>
Var<T> stack(std::initializer_list<Var<T>> parts, std::size_t axis = 0) {
  std::vector<Var<T>> v(parts);
  return stack<T>(std::span<const Var<T>>(v), axis);
}

// Removes `axis` by summation.
template <class T>
Var<T> sum(const Var<T>& a, std::size_t axis) {
  Tensor<T> out = kernel::sum_axis(a.value(), axis);
  return detail::finish<T>(
      "sum", std::move(out), {&a},
      [na = a.node(), s = a.shape(), axis](Tape<T>& tape, const Tensor<T>& g) {
        Shape keep = s;
        keep[axis] = 1;
        tape.accumulate(na, kernel::binary(kernel::BinaryOp::kAdd,
                                           Tensor<T>(s), g.reshaped(keep)));
      });
}

template <class T>
Var<T> sum_all(const Var<T>& a) {
  T acc = 0;
  for (T v : a.value().data()) acc += v;
  return detail::finish<T>(
      "sum_all", Tensor<T>::scalar(acc), {&a},
      [na = a.node(), s = a.shape()](Tape<T>& tape, const Tensor<T>& g) {
        tape.accumulate(na, Tensor<T>(s, g[0]));
      });
}

template <class T>
std::vector<Var<T>> split(const Var<T>& a, std::size_t axis,
                          std::size_t parts) {
  auto pieces = kernel::split(a.value(), axis, parts);
  std::vector<Var<T>> out;
  const std::size_t m = a.dim(axis) / parts;
  for (std::size_t p = 0; p < parts; ++p) {
    out.push_back(detail::finish<T>(
        "split", std::move(pieces[p]), {&a},
        [na = a.node(), s = a.shape(), axis, p, m](Tape<T>& tape,
                                                   const Tensor<T>& g) {
          const std::size_t n = s[axis];
          const std::size_t inner =
              shape_numel(Shape(s.begin() + axis + 1, s.end()));
          const std::size_t outer = shape_numel(s) / (n * inner);
          Tensor<T>& dst = tape.grad_buffer(na);
          for (std::size_t o = 0; o < outer; ++o) {
            T* d = dst.ptr() + (o * n + p * m) * inner;
            const T* src = g.ptr() + o * m * inner;
            for (std::size_t i = 0; i < m * inner; ++i) d[i] += src[i];
          }
        }));
  }
  return out;
}

template <class T>
Var<T> mean_pool_ft(const Var<T>& x) {
  Tensor<T> out = kernel::mean_pool_ft(x.value());
  return detail::finish<T>(
      "mean_pool_ft", std::move(out), {&x},
      [nx = x.node(), s = x.shape()](Tape<T>& tape, const Tensor<T>& g) {
        const std::size_t B = s[0], C = s[1], S = s[2] * s[3];
        Tensor<T> gx(s);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t c = 0; c < C; ++c) {
            const T v = g[b * C + c] / static_cast<T>(S);
            std::fill_n(gx.ptr() + (b * C + c) * S, S, v);
          }
        tape.accumulate(nx, std::move(gx));
      });
}

using IndexMap = std::shared_ptr<const std::vector<std::uint32_t>>;

// out[i] = x[index[i]]; the adjoint scatters and adds.
template <class T>
Var<T> gather(const Var<T>& x, IndexMap index, Shape out_shape) {
  for (std::uint32_t i : *index)
    if (i >= x.value().size()) throw ShapeError("gather: index out of range");
  Tensor<T> out = kernel::gather(x.value(), *index, std::move(out_shape));
  return detail::finish<T>(
      "gather", std::move(out), {&x},
      [nx = x.node(), s = x.shape(), index](Tape<T>& tape,
                                            const Tensor<T>& g) {
        Tensor<T>& dst = tape.grad_buffer(nx);
        if (dst.shape() != s) throw ShapeError("gather: gradient shape");
        const auto& idx = *index;
        for (std::size_t i = 0; i < idx.size(); ++i) dst[idx[i]] += g[i];
      });
}

namespace detail {

// Statistics over `rows` consecutive rows of length S (channel c owns
// rows_per_c of them), separately for each b and each of the S columns.
template <class T>
Var<T> layer_norm_rows(const Var<T>& x, const Var<T>& gamma,
                       const Var<T>& beta, T eps, std::size_t rows_per_c,
                       const char* op) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() < 2 || gamma.shape() != Shape{xv.dim(1)} ||
      beta.shape() != Shape{xv.dim(1)})
    throw ShapeError(std::string(op) + ": input " + shape_str(xv.shape()) +
                     " gamma " + shape_str(gamma.shape()));
  const std::size_t B = xv.dim(0), C = xv.dim(1), R = C * rows_per_c;
  const std::size_t S = xv.size() / (B * R), G = rows_per_c;
  auto xhat = std::make_shared<Tensor<T>>(xv.shape());
  auto inv_std = std::make_shared<Tensor<T>>(Shape{B, S});
  Tensor<T> out(xv.shape());
  std::vector<T> mean(S), var(S);
  for (std::size_t b = 0; b < B; ++b) {
    const T* px = xv.ptr() + b * R * S;
    std::fill(mean.begin(), mean.end(), T(0));
    std::fill(var.begin(), var.end(), T(0));
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t s = 0; s < S; ++s) mean[s] += px[r * S + s];
    for (std::size_t s = 0; s < S; ++s) mean[s] /= static_cast<T>(R);
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t s = 0; s < S; ++s) {
        const T d = px[r * S + s] - mean[s];
        var[s] += d * d;
      }
    T* pis = inv_std->ptr() + b * S;
    for (std::size_t s = 0; s < S; ++s)
      pis[s] = T(1) / std::sqrt(var[s] / static_cast<T>(R) + eps);
    T* ph = xhat->ptr() + b * R * S;
    T* po = out.ptr() + b * R * S;
    for (std::size_t r = 0; r < R; ++r) {
      const T gc = gamma.value()[r / G], bc = beta.value()[r / G];
      for (std::size_t s = 0; s < S; ++s) {
        const T h = (px[r * S + s] - mean[s]) * pis[s];
        ph[r * S + s] = h;
        po[r * S + s] = gc * h + bc;
      }
    }
  }
  return finish<T>(
      op, std::move(out), {&x, &gamma, &beta},
      [nx = x.node(), ng = gamma.node(), nb = beta.node(), xhat, inv_std,
       vg = gamma.value_ptr(), B, C, R, S, G](Tape<T>& tape,
                                              const Tensor<T>& g) {
        Tensor<T> gx(xhat->shape()), gg({C}), gb({C});
        std::vector<T> m1(S), m2(S);
        const T invR = T(1) / static_cast<T>(R);
        for (std::size_t b = 0; b < B; ++b) {
          const T* pg = g.ptr() + b * R * S;
          const T* ph = xhat->ptr() + b * R * S;
          std::fill(m1.begin(), m1.end(), T(0));
          std::fill(m2.begin(), m2.end(), T(0));
          for (std::size_t r = 0; r < R; ++r) {
            const T gc = (*vg)[r / G];
            T acc_g = 0, acc_b = 0;
            for (std::size_t s = 0; s < S; ++s) {
              const T gh = pg[r * S + s] * gc;
              m1[s] += gh;
              m2[s] += gh * ph[r * S + s];
              acc_g += pg[r * S + s] * ph[r * S + s];
              acc_b += pg[r * S + s];
            }
            gg[r / G] += acc_g;
            gb[r / G] += acc_b;
          }
          const T* pis = inv_std->ptr() + b * S;
          T* pgx = gx.ptr() + b * R * S;
          for (std::size_t r = 0; r < R; ++r) {
            const T gc = (*vg)[r / G];
            for (std::size_t s = 0; s < S; ++s) {
              const T gh = pg[r * S + s] * gc;
              pgx[r * S + s] =
                  pis[s] * (gh - m1[s] * invR - ph[r * S + s] * m2[s] * invR);
            }
          }
        }
        if (nx != kNoNode) tape.accumulate(nx, std::move(gx));
        if (ng != kNoNode) tape.accumulate(ng, std::move(gg));
        if (nb != kNoNode) tape.accumulate(nb, std::move(gb));
      });
}

}  // namespace detail

// Normalizes over axis 1 (channels) of a (B, C, ...) tensor per position.
template <class T>
Var<T> layer_norm_channels(const Var<T>& x, const Var<T>& gamma,
                           const Var<T>& beta, T eps = T(1e-5)) {
  return detail::layer_norm_rows(x, gamma, beta, eps, 1, "layer_norm");
}

// Normalizes a (B, C, F, T) tensor over (C, F) jointly, per frame; the
// affine parameters are per channel.
template <class T>
Var<T> layer_norm_frames(const Var<T>& x, const Var<T>& gamma,
                         const Var<T>& beta, T eps = T(1e-5)) {
  if (x.shape().size() != 4)
    throw ShapeError("layer_norm_frames: expected (B, C, F, T), got " +
                     shape_str(x.shape()));
  return detail::layer_norm_rows(x, gamma, beta, eps, x.dim(2),
                                 "layer_norm_frames");
}

}  // namespace omniscan
