// Copyright 2026 The omniscan Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Built with -ffast-math (see CMakeLists.txt). Inputs are finite and
// delta * A <= 0, so exp never overflows.

#include "omniscan/scan_kernels.hpp"

#include <cmath>
#include <vector>

namespace omniscan::kernel {
namespace {

constexpr double kSeries = 1e-8;

// abar = exp(d a); gain = (abar - 1) / a, or d (1 + z / 2) near z = 0.
template <class T>
inline void zoh(T d, T a, T inv_a, T& abar, T& gain) {
  const T z = d * a;
  abar = std::exp(z);
  gain = std::abs(z) < T(kSeries) ? d * (T(1) + z / 2) : (abar - T(1)) * inv_a;
}

// Internally the state is laid out (H, E) so the innermost loops run over
// channels without horizontal reductions.

template <class T>
std::vector<T> transposed(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = a[r * cols + c];
  return out;
}

template <class T>
void fwd_impl(const ScanRefs<T>& s, T* __restrict y) {
  const std::size_t E = s.E, H = s.H, S = E * H;
  const std::vector<T> at = transposed(s.A, E, H);  // (H, E)
  std::vector<T> inv_a(S), h(S), acc(E);
  for (std::size_t k = 0; k < S; ++k) inv_a[k] = T(1) / at[k];
  for (std::size_t n = 0; n < s.N; ++n) {
    std::fill(h.begin(), h.end(), T(0));
    for (std::size_t t = 0; t < s.L; ++t) {
      const std::size_t row = n * s.L + t;
      const T* __restrict ut = s.u + row * E;
      const T* __restrict dt = s.delta + row * E;
      const T* __restrict bt = s.B + row * H;
      const T* __restrict ct = s.C + row * H;
      T* __restrict ac = acc.data();
      for (std::size_t e = 0; e < E; ++e) ac[e] = s.D[e] * ut[e];
      for (std::size_t j = 0; j < H; ++j) {
        const T b = bt[j], c = ct[j];
        const T* __restrict aj = at.data() + j * E;
        const T* __restrict ij = inv_a.data() + j * E;
        T* __restrict hj = h.data() + j * E;
        for (std::size_t e = 0; e < E; ++e) {
          T abar, gain;
          zoh(dt[e], aj[e], ij[e], abar, gain);
          hj[e] = abar * hj[e] + gain * b * ut[e];
          ac[e] += c * hj[e];
        }
      }
      std::copy(ac, ac + E, y + row * E);
    }
  }
}

template <class T>
void bwd_impl(const ScanRefs<T>& s, const T* __restrict gy,
              const ScanGradRefs<T>& g) {
  const std::size_t E = s.E, H = s.H, S = E * H, L = s.L;
  const std::vector<T> at = transposed(s.A, E, H);  // (H, E)
  std::vector<T> inv_a(S), abars(L * S), hs(L * S), gh(S), zero(S, T(0));
  std::vector<T> ga(S, T(0)), gu(E), gd(E);
  for (std::size_t k = 0; k < S; ++k) inv_a[k] = T(1) / at[k];
  for (std::size_t n = 0; n < s.N; ++n) {
    // Replay the forward for this sequence.
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t row = n * L + t;
      const T* __restrict ut = s.u + row * E;
      const T* __restrict dt = s.delta + row * E;
      const T* __restrict bt = s.B + row * H;
      T* __restrict abt = abars.data() + t * S;
      T* __restrict ht = hs.data() + t * S;
      const T* __restrict hp = t > 0 ? ht - S : zero.data();
      for (std::size_t j = 0; j < H; ++j) {
        const T b = bt[j];
        const std::size_t o = j * E;
        for (std::size_t e = 0; e < E; ++e) {
          T gain;
          zoh(dt[e], at[o + e], inv_a[o + e], abt[o + e], gain);
          ht[o + e] = abt[o + e] * hp[o + e] + gain * b * ut[e];
        }
      }
    }
    std::fill(gh.begin(), gh.end(), T(0));
    for (std::size_t t = L; t-- > 0;) {
      const std::size_t row = n * L + t;
      const T* __restrict ut = s.u + row * E;
      const T* __restrict dt = s.delta + row * E;
      const T* __restrict bt = s.B + row * H;
      const T* __restrict ct = s.C + row * H;
      const T* __restrict go = gy + row * E;
      const T* __restrict abt = abars.data() + t * S;
      const T* __restrict ht = hs.data() + t * S;
      const T* __restrict hp = t > 0 ? ht - S : zero.data();
      T* __restrict pgu = gu.data();
      T* __restrict pgd = gd.data();
      for (std::size_t e = 0; e < E; ++e) {
        pgu[e] = s.D[e] * go[e];
        pgd[e] = 0;
      }
      for (std::size_t j = 0; j < H; ++j) {
        const T b = bt[j], c = ct[j];
        const std::size_t o = j * E;
        T* __restrict ghj = gh.data() + o;
        T* __restrict gaj = ga.data() + o;
        T gc = 0, gb = 0;
        for (std::size_t e = 0; e < E; ++e) {
          const T d = dt[e], x = ut[e];
          const T a = at[o + e], ab = abt[o + e], ia = inv_a[o + e];
          const T z = d * a;
          const bool series = std::abs(z) < T(kSeries);
          const T gain = series ? d * (T(1) + z / 2) : (ab - T(1)) * ia;
          const T dgain_da = series ? d * d / 2 : (d * ab - gain) * ia;
          const T gh_t = ghj[e] + c * go[e];
          gc += go[e] * ht[o + e];
          const T g_abar = gh_t * hp[o + e];
          const T g_gain = gh_t * b * x;
          gb += gh_t * gain * x;
          pgu[e] += gh_t * gain * b;
          // abar = exp(d a): d abar = abar (a dd + d da); d gain / dd = abar.
          pgd[e] += (g_abar * a + g_gain) * ab;
          gaj[e] += g_abar * d * ab + g_gain * dgain_da;
          ghj[e] = gh_t * ab;
        }
        g.C[row * H + j] += gc;
        g.B[row * H + j] += gb;
      }
      for (std::size_t e = 0; e < E; ++e) {
        g.D[e] += go[e] * ut[e];
        g.u[row * E + e] = pgu[e];
        g.delta[row * E + e] = pgd[e];
      }
    }
  }
  for (std::size_t e = 0; e < E; ++e)
    for (std::size_t j = 0; j < H; ++j) g.A[e * H + j] += ga[j * E + e];
}

}  // namespace

void selective_scan_fwd(const ScanRefs<double>& s, double* y) { fwd_impl(s, y); }
void selective_scan_fwd(const ScanRefs<float>& s, float* y) { fwd_impl(s, y); }
void selective_scan_bwd(const ScanRefs<double>& s, const double* gy,
                        const ScanGradRefs<double>& g) {
  bwd_impl(s, gy, g);
}
void selective_scan_bwd(const ScanRefs<float>& s, const float* gy,
                        const ScanGradRefs<float>& g) {
  bwd_impl(s, gy, g);
}

}  // namespace omniscan::kernel
