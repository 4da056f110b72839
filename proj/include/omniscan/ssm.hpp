// Copyright 2026 The omniscan Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Selective state-space model: zero-order-hold discretization, the linear
// recurrence in three equivalent forms (sequential, convolution kernel,
// associative parallel scan), the fused differentiable selective scan, and
// the Mamba block built on it.

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "omniscan/autodiff.hpp"
#include "omniscan/errors.hpp"
#include "omniscan/kernels.hpp"
#include "omniscan/mac_counter.hpp"
#include "omniscan/params.hpp"
#include "omniscan/tensor.hpp"
#include "omniscan/scan_kernels.hpp"

namespace omniscan::ssm {

// Below this |delta * a| the input gain uses its series expansion.
inline constexpr double kSeriesThreshold = 1e-8;

template <class T>
struct Zoh {
  T abar;
  T bbar;
};

// Scalar zero-order hold for one diagonal entry.
template <class T>
Zoh<T> zoh(T delta, T a, T b) {
  const T z = delta * a;
  const T em1 = std::expm1(z);
  const T gain = std::abs(z) < T(kSeriesThreshold) ? delta * (T(1) + z / 2)
                                                    : em1 / a;
  return {T(1) + em1, gain * b};
}

template <class T>
struct Discretized {
  Tensor<T> abar;
  Tensor<T> bbar;
};

// Elementwise ZOH over a diagonal system. `delta` is a scalar or per-entry.
template <class T>
Discretized<T> discretize(const Tensor<T>& delta, const Tensor<T>& a_diag,
                          const Tensor<T>& b) {
  if (a_diag.shape() != b.shape())
    throw ShapeError("discretize: A " + shape_str(a_diag.shape()) + " vs B " +
                     shape_str(b.shape()));
  if (delta.size() != 1 && delta.shape() != a_diag.shape())
    throw ShapeError("discretize: delta shape " + shape_str(delta.shape()));
  Discretized<T> out{Tensor<T>(a_diag.shape()), Tensor<T>(a_diag.shape())};
  for (std::size_t i = 0; i < a_diag.size(); ++i) {
    const T d = delta[delta.size() == 1 ? 0 : i];
    if (!(d > 0)) throw DomainError("discretize: step size must be positive");
    if (!(a_diag[i] < 0))
      throw DomainError("discretize: diagonal of A must be negative");
    const Zoh<T> z = zoh(d, a_diag[i], b[i]);
    out.abar[i] = z.abar;
    out.bbar[i] = z.bbar;
  }
  return out;
}

// Per-step discrete system acting on D independent channels with H states.
//   abar, bbar: (L, D, H); c: (L, H); d_skip: (D)
template <class T>
struct DiscreteSystem {
  Tensor<T> abar;
  Tensor<T> bbar;
  Tensor<T> c;
  Tensor<T> d_skip;

  std::size_t length() const { return abar.dim(0); }
  std::size_t channels() const { return abar.dim(1); }
  std::size_t states() const { return abar.dim(2); }

  void validate(const Tensor<T>& x) const {
    if (abar.rank() != 3 || bbar.shape() != abar.shape() || c.rank() != 2 ||
        c.dim(0) != length() || c.dim(1) != states() ||
        d_skip.shape() != Shape{channels()})
      throw ShapeError("discrete system: inconsistent parameter shapes");
    if (x.shape() != Shape{length(), channels()})
      throw ShapeError("scan: input " + shape_str(x.shape()) +
                       " does not match system (" + std::to_string(length()) +
                       ", " + std::to_string(channels()) + ")");
  }
};

// h_t = abar_t h_{t-1} + bbar_t x_t, y_t = c_t . h_t + d x_t, h_0 = 0,
// strictly left to right. `max_state`, when given, receives max |h|.
template <class T>
Tensor<T> scan_sequential(const Tensor<T>& x, const DiscreteSystem<T>& sys,
                          T* max_state = nullptr) {
  sys.validate(x);
  const std::size_t L = sys.length(), D = sys.channels(), H = sys.states();
  Tensor<T> y({L, D});
  std::vector<T> h(D * H, T(0));
  T peak = 0;
  for (std::size_t t = 0; t < L; ++t) {
    const T* ct = sys.c.ptr() + t * H;
    for (std::size_t d = 0; d < D; ++d) {
      const T xt = x[t * D + d];
      const T* a = sys.abar.ptr() + (t * D + d) * H;
      const T* b = sys.bbar.ptr() + (t * D + d) * H;
      T* hd = h.data() + d * H;
      T acc = 0;
      for (std::size_t j = 0; j < H; ++j) {
        hd[j] = a[j] * hd[j] + b[j] * xt;
        acc += ct[j] * hd[j];
        peak = std::max(peak, std::abs(hd[j]));
      }
      y[t * D + d] = acc + sys.d_skip[d] * xt;
    }
  }
  if (max_state) *max_state = peak;
  return y;
}

// K = (c.bbar, c.abar bbar, ..., c.abar^{L-1} bbar) for a time-invariant
// diagonal system.
template <class T>
Tensor<T> kernel_materialize(const Tensor<T>& abar, const Tensor<T>& bbar,
                             const Tensor<T>& c, std::size_t length) {
  if (abar.shape() != bbar.shape() || abar.shape() != c.shape() ||
      abar.rank() != 1)
    throw ShapeError("kernel_materialize: abar/bbar/c must share shape (H)");
  const std::size_t H = abar.dim(0);
  Tensor<T> k({length});
  std::vector<T> p(bbar.data().begin(), bbar.data().end());
  for (std::size_t l = 0; l < length; ++l) {
    T acc = 0;
    for (std::size_t j = 0; j < H; ++j) {
      acc += c[j] * p[j];
      p[j] *= abar[j];
    }
    k[l] = acc;
  }
  return k;
}

// Causal convolution y_t = sum_{k<=t} K_k x_{t-k}.
template <class T>
Tensor<T> scan_via_kernel(const Tensor<T>& x, const Tensor<T>& k) {
  if (x.rank() != 1 || x.shape() != k.shape())
    throw ShapeError("scan_via_kernel: x " + shape_str(x.shape()) + " vs K " +
                     shape_str(k.shape()));
  const std::size_t L = x.dim(0);
  Tensor<T> y({L});
  for (std::size_t t = 0; t < L; ++t) {
    T acc = 0;
    for (std::size_t j = 0; j <= t; ++j) acc += k[j] * x[t - j];
    y[t] = acc;
  }
  return y;
}

// Affine map h -> a h + b. compose(later, earlier) applies `earlier` first.
template <class T>
struct Affine {
  T a;
  T b;
};

struct AffineCompose {
  template <class T>
  Affine<T> operator()(const Affine<T>& later, const Affine<T>& earlier) const {
    return {later.a * earlier.a, later.a * earlier.b + later.b};
  }
};

// Work-efficient (Blelloch) inclusive scan of affine maps in sequence order.
// Returns the b-component of each prefix, i.e. the state reached from h = 0.
template <class T, class Compose = AffineCompose>
std::vector<T> affine_prefix_states(std::vector<Affine<T>> items,
                                    Compose compose = {}) {
  const std::size_t L = items.size();
  if (L == 0) return {};
  const std::size_t n = std::bit_ceil(L);
  const std::vector<Affine<T>> elems = items;
  items.resize(n, Affine<T>{T(1), T(0)});
  // Up-sweep: items[i] becomes the composition of its subtree.
  for (std::size_t d = 1; d < n; d *= 2)
    for (std::size_t i = 2 * d - 1; i < n; i += 2 * d)
      items[i] = compose(items[i], items[i - d]);
  // Down-sweep to exclusive prefixes.
  items[n - 1] = Affine<T>{T(1), T(0)};
  for (std::size_t d = n / 2; d >= 1; d /= 2) {
    for (std::size_t i = 2 * d - 1; i < n; i += 2 * d) {
      const Affine<T> left = items[i - d];
      items[i - d] = items[i];
      items[i] = compose(left, items[i]);
    }
  }
  std::vector<T> states(L);
  for (std::size_t t = 0; t < L; ++t)
    states[t] = compose(elems[t], items[t]).b;
  return states;
}

// Same contract as scan_sequential, computed by an associative scan per
// (channel, state) lane.
template <class T, class Compose = AffineCompose>
Tensor<T> scan_parallel(const Tensor<T>& x, const DiscreteSystem<T>& sys,
                        Compose compose = {}) {
  sys.validate(x);
  const std::size_t L = sys.length(), D = sys.channels(), H = sys.states();
  Tensor<T> y({L, D});
  std::vector<Affine<T>> lane(L);
  for (std::size_t d = 0; d < D; ++d) {
    for (std::size_t j = 0; j < H; ++j) {
      for (std::size_t t = 0; t < L; ++t) {
        const std::size_t i = (t * D + d) * H + j;
        lane[t] = {sys.abar[i], sys.bbar[i] * x[t * D + d]};
      }
      const std::vector<T> h = affine_prefix_states(lane, compose);
      for (std::size_t t = 0; t < L; ++t) y[t * D + d] += sys.c[t * H + j] * h[t];
    }
    for (std::size_t t = 0; t < L; ++t)
      y[t * D + d] += sys.d_skip[d] * x[t * D + d];
  }
  return y;
}

// ---------------------------------------------------------------------------
// Fused selective scan.
//
//   u, delta: (N, L, E)   A: (E, H) negative   B, C: (N, L, H)   D: (E)
//   h[n,t,e,:] = exp(delta A[e]) h[n,t-1,e,:] + zoh_gain(delta, A[e]) B[n,t] u
//   y[n,t,e]   = C[n,t] . h[n,t,e,:] + D[e] u[n,t,e]
//
// Reported MACs: 6 per state element per step (delta*A, gain, gain*B, *u,
// state update, readout) plus 1 per channel per step for the skip term.

struct ScanShape {
  std::size_t N, L, E, H;
};

template <class T>
ScanShape check_scan_shapes(const Tensor<T>& u, const Tensor<T>& delta,
                            const Tensor<T>& A, const Tensor<T>& B,
                            const Tensor<T>& C, const Tensor<T>& D) {
  if (u.rank() != 3 || delta.shape() != u.shape() || A.rank() != 2 ||
      A.dim(0) != u.dim(2) || B.rank() != 3 || B.dim(0) != u.dim(0) ||
      B.dim(1) != u.dim(1) || B.dim(2) != A.dim(1) || C.shape() != B.shape() ||
      D.shape() != Shape{u.dim(2)})
    throw ShapeError("selective_scan: u " + shape_str(u.shape()) + " delta " +
                     shape_str(delta.shape()) + " A " + shape_str(A.shape()) +
                     " B " + shape_str(B.shape()) + " C " +
                     shape_str(C.shape()) + " D " + shape_str(D.shape()));
  return {u.dim(0), u.dim(1), u.dim(2), A.dim(1)};
}

template <class T>
Tensor<T> selective_scan_forward(const Tensor<T>& u, const Tensor<T>& delta,
                                 const Tensor<T>& A, const Tensor<T>& B,
                                 const Tensor<T>& C, const Tensor<T>& D) {
  const auto [N, L, E, H] = check_scan_shapes(u, delta, A, B, C, D);
  Tensor<T> y(u.shape());
  kernel::selective_scan_fwd(kernel::ScanRefs<T>{u.ptr(), delta.ptr(), A.ptr(),
                                                 B.ptr(), C.ptr(), D.ptr(), N,
                                                 L, E, H},
                             y.ptr());
  MacCounter::add(std::uint64_t{N} * L * E * (6 * H + 1));
  return y;
}

template <class T>
struct ScanGrads {
  Tensor<T> u, delta, A, B, C, D;
};

// Adjoint of selective_scan_forward. The forward is replayed one sequence at
// a time, so memory is O(L * E * H) beyond the inputs.
template <class T>
ScanGrads<T> selective_scan_backward(const Tensor<T>& gy, const Tensor<T>& u,
                                     const Tensor<T>& delta, const Tensor<T>& A,
                                     const Tensor<T>& B, const Tensor<T>& C,
                                     const Tensor<T>& D) {
  const auto [N, L, E, H] = check_scan_shapes(u, delta, A, B, C, D);
  if (gy.shape() != u.shape())
    throw ShapeError("selective_scan: output gradient " +
                     shape_str(gy.shape()));
  ScanGrads<T> g{Tensor<T>(u.shape()), Tensor<T>(u.shape()),
                 Tensor<T>(A.shape()), Tensor<T>(B.shape()),
                 Tensor<T>(B.shape()), Tensor<T>(D.shape())};
  kernel::selective_scan_bwd(
      kernel::ScanRefs<T>{u.ptr(), delta.ptr(), A.ptr(), B.ptr(), C.ptr(),
                          D.ptr(), N, L, E, H},
      gy.ptr(),
      kernel::ScanGradRefs<T>{g.u.ptr(), g.delta.ptr(), g.A.ptr(), g.B.ptr(),
                              g.C.ptr(), g.D.ptr()});
  return g;
}

template <class T>
Var<T> selective_scan_core(const Var<T>& u, const Var<T>& delta,
                           const Var<T>& A, const Var<T>& B, const Var<T>& C,
                           const Var<T>& D) {
  Tensor<T> y = selective_scan_forward(u.value(), delta.value(), A.value(),
                                       B.value(), C.value(), D.value());
  return detail::finish<T>(
      "selective_scan", std::move(y), {&u, &delta, &A, &B, &C, &D},
      [nu = u.node(), nd = delta.node(), na = A.node(), nb = B.node(),
       nc = C.node(), ns = D.node(), vu = u.value_ptr(),
       vd = delta.value_ptr(), va = A.value_ptr(), vb = B.value_ptr(),
       vc = C.value_ptr(), vs = D.value_ptr()](Tape<T>& tape,
                                               const Tensor<T>& gy) {
        ScanGrads<T> g =
            selective_scan_backward(gy, *vu, *vd, *va, *vb, *vc, *vs);
        if (nu != kNoNode) tape.accumulate(nu, std::move(g.u));
        if (nd != kNoNode) tape.accumulate(nd, std::move(g.delta));
        if (na != kNoNode) tape.accumulate(na, std::move(g.A));
        if (nb != kNoNode) tape.accumulate(nb, std::move(g.B));
        if (nc != kNoNode) tape.accumulate(nc, std::move(g.C));
        if (ns != kNoNode) tape.accumulate(ns, std::move(g.D));
      });
}

// ---------------------------------------------------------------------------
// Parameterized selective SSM and the Mamba block.

struct MambaConfig {
  std::size_t d_model = 24;
  std::size_t d_inner = 48;  // expansion 2 unless overridden
  std::size_t d_state = 16;
  std::size_t dt_rank = 2;   // ceil(d_model / 16)
  std::size_t conv_width = 4;
  bool use_conv = true;
  bool use_gate = true;
};

inline MambaConfig mamba_config(std::size_t d_model, std::size_t d_state,
                                std::size_t d_inner = 0) {
  MambaConfig c;
  c.d_model = d_model;
  c.d_state = d_state;
  c.d_inner = d_inner ? d_inner : 2 * d_model;
  c.dt_rank = (d_model + 15) / 16;
  return c;
}

// Parameter names, relative to the block scope:
//   in_proj (E, D)  conv_w (E, K)  conv_b (E)  gate_proj (E, D)
//   out_proj (D, E)  ssm.{dt_down (r, E), dt_up (E, r), dt_bias (E),
//   b_proj (H, E), c_proj (H, E), a_log (E, H), d_skip (E)}
template <std::floating_point T>
void init_mamba(ParamStore<T>& store, const std::string& prefix,
                const MambaConfig& cfg, Rng& rng) {
  const std::size_t D = cfg.d_model, E = cfg.d_inner, H = cfg.d_state;
  const std::size_t r = cfg.dt_rank, K = cfg.conv_width;
  auto name = [&](const char* n) { return prefix + "." + n; };
  store.add(name("in_proj"), init::fan_in_uniform<T>({E, D}, D, rng));
  if (cfg.use_conv) {
    store.add(name("conv_w"), init::fan_in_uniform<T>({E, K}, K, rng));
    store.add(name("conv_b"), Tensor<T>({E}));
  }
  if (cfg.use_gate)
    store.add(name("gate_proj"), init::fan_in_uniform<T>({E, D}, D, rng));
  store.add(name("out_proj"), init::fan_in_uniform<T>({D, E}, E, rng));
  store.add(name("ssm.dt_down"), init::fan_in_uniform<T>({r, E}, E, rng));
  store.add(name("ssm.dt_up"), init::fan_in_uniform<T>({E, r}, r, rng));
  // softplus(dt_bias) log-uniform in [1e-3, 1e-1].
  Tensor<T> dt_bias({E});
  std::uniform_real_distribution<double> u(std::log(1e-3), std::log(1e-1));
  for (auto& v : dt_bias.data()) {
    const double dt = std::exp(u(rng));
    v = static_cast<T>(dt + std::log(-std::expm1(-dt)));
  }
  store.add(name("ssm.dt_bias"), std::move(dt_bias));
  store.add(name("ssm.b_proj"), init::fan_in_uniform<T>({H, E}, E, rng));
  store.add(name("ssm.c_proj"), init::fan_in_uniform<T>({H, E}, E, rng));
  Tensor<T> a_log({E, H});
  for (std::size_t e = 0; e < E; ++e)
    for (std::size_t j = 0; j < H; ++j)
      a_log[e * H + j] = static_cast<T>(std::log(static_cast<double>(j + 1)));
  store.add(name("ssm.a_log"), std::move(a_log));
  store.add(name("ssm.d_skip"), Tensor<T>({E}, T(1)));
}

inline std::size_t mamba_param_count(const MambaConfig& cfg) {
  const std::size_t D = cfg.d_model, E = cfg.d_inner, H = cfg.d_state;
  const std::size_t r = cfg.dt_rank, K = cfg.conv_width;
  std::size_t n = E * D + D * E;                    // in / out projections
  if (cfg.use_conv) n += E * K + E;
  if (cfg.use_gate) n += E * D;
  n += r * E + E * r + E + H * E + H * E + E * H + E;  // selective SSM
  return n;
}

// Exact forward MACs of mamba_block over N sequences of length L.
inline std::uint64_t mamba_macs(std::uint64_t N, std::uint64_t L,
                                const MambaConfig& cfg) {
  const std::uint64_t D = cfg.d_model, E = cfg.d_inner, H = cfg.d_state;
  const std::uint64_t r = cfg.dt_rank, K = cfg.conv_width;
  std::uint64_t per_pos = D * E          // in_proj
                          + 2 * E * r    // dt_down, dt_up
                          + 2 * E * H    // b_proj, c_proj
                          + E * (6 * H + 1)  // scan
                          + E * D;       // out_proj
  if (cfg.use_conv) per_pos += E * K;
  if (cfg.use_gate) per_pos += E * D + E;  // gate projection and product
  return N * L * per_pos;
}

// Selective SSM over u: (N, L, E) (or (L, E)) with input-dependent delta,
// B and C.
template <class T>
Var<T> selective_scan(const Scope<T>& p, const Var<T>& u) {
  if (u.shape().size() == 2) {
    const Shape s = u.shape();
    return reshape(selective_scan(p, reshape(u, {1, s[0], s[1]})), s);
  }
  const Var<T> delta =
      softplus(linear(linear(u, p["dt_down"]), p["dt_up"], p["dt_bias"]));
  const Var<T> b = linear(u, p["b_proj"]);
  const Var<T> c = linear(u, p["c_proj"]);
  const Var<T> a = negate(exp(p["a_log"]));
  return selective_scan_core(u, delta, a, b, c, p["d_skip"]);
}

// x: (N, L, D) -> (N, L, D)
template <class T>
Var<T> mamba_block(const Scope<T>& p, const MambaConfig& cfg, const Var<T>& x) {
  if (x.shape().size() != 3 || x.dim(2) != cfg.d_model)
    throw ShapeError("mamba_block: expected (N, L, " +
                     std::to_string(cfg.d_model) + "), got " +
                     shape_str(x.shape()));
  Var<T> xi = linear(x, p["in_proj"]);
  if (cfg.use_conv) xi = causal_depthwise_conv(xi, p["conv_w"], p["conv_b"]);
  const Var<T> u = silu(xi);
  Var<T> y = selective_scan(p.sub("ssm"), u);
  if (cfg.use_gate) y = mul(y, silu(linear(x, p["gate_proj"])));
  return linear(y, p["out_proj"]);
}

}  // namespace omniscan::ssm
