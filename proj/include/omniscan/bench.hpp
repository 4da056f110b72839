// Copyright 2026 The omniscan Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// MAC counts and wall-clock timing of OA against a single-head full-sequence
// self-attention baseline over T frames.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "omniscan/autodiff.hpp"
#include "omniscan/errors.hpp"
#include "omniscan/kernels.hpp"
#include "omniscan/mac_counter.hpp"
#include "omniscan/omniscan.hpp"
#include "omniscan/params.hpp"
#include "omniscan/tensor.hpp"

namespace omniscan::bench {

// ---------------------------------------------------------------------------
// Closed-form counts.

inline OAConfig bench_oa_config(std::size_t C, std::size_t H,
                                const std::string& direction_set) {
  return oa_config(C, H, DirectionSet::preset(direction_set));
}

inline std::uint64_t count_macs_oa(std::uint64_t B, std::uint64_t C,
                                   std::uint64_t F, std::uint64_t T,
                                   std::uint64_t H,
                                   const std::string& direction_set) {
  if (B == 0 || C == 0 || F == 0 || T == 0 || H == 0)
    throw ContractError("count_macs_oa: dimensions must be positive");
  return oa_macs(B, F, T, bench_oa_config(C, H, direction_set));
}

// Per layer: QKV 3 T D^2, scores T^2 D, weighted sum T^2 D, output T D^2.
inline std::uint64_t count_macs_attention(std::uint64_t B, std::uint64_t layers,
                                          std::uint64_t T, std::uint64_t D) {
  if (B == 0 || layers == 0 || T == 0 || D == 0)
    throw ContractError("count_macs_attention: dimensions must be positive");
  return B * layers * (4 * T * D * D + 2 * T * T * D);
}

inline std::string formula_notes() {
  return "oa: P=B*F*T; P*2C^2 (conv) + n_dir*P*m(C,2C,H) (shared Mamba per "
         "direction) + P*C (gate) [+ P*C (pool) + 2*B*C*m(1,8,H) (channel "
         "scans) + P*C (channel gate)]; m(D,E,H)=D*E (in) + E*K (conv) + "
         "2*E*r (dt) + 2*E*H (B,C) + E*(6H+1) (scan) + D*E+E (gate) + E*D "
         "(out), r=ceil(D/16), K=4. attention: B*L*(4*T*D^2 + 2*T^2*D)";
}

// ---------------------------------------------------------------------------
// Baseline attention.

template <std::floating_point T>
struct AttentionParams {
  Tensor<T> wq, wk, wv, wo;  // (D, D), applied as x W^T
};

template <std::floating_point T>
AttentionParams<T> make_attention_params(std::size_t D, Rng& rng) {
  AttentionParams<T> p;
  for (Tensor<T>* w : {&p.wq, &p.wk, &p.wv, &p.wo})
    *w = init::fan_in_uniform<T>({D, D}, D, rng);
  // The 1/sqrt(D) score scale lives in wq, so no separate multiply exists.
  for (T& v : p.wq.data()) v /= std::sqrt(static_cast<T>(D));
  return p;
}

namespace detail {

template <class T>
void softmax_rows(T* s, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    T* r = s + i * cols;
    const T m = *std::max_element(r, r + cols);
    T z = 0;
    for (std::size_t j = 0; j < cols; ++j) z += (r[j] = std::exp(r[j] - m));
    for (std::size_t j = 0; j < cols; ++j) r[j] /= z;
  }
}

}  // namespace detail

// x: (B, T, D). GEMM-backed; MACs reported through the kernels.
template <std::floating_point T>
Tensor<T> attention_forward(const Tensor<T>& x, const AttentionParams<T>& p) {
  if (x.rank() != 3 || p.wq.shape() != Shape{x.dim(2), x.dim(2)})
    throw ShapeError("attention: input " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), L = x.dim(1);
  const Tensor<T> q = kernel::linear<T>(x, p.wq, nullptr);
  const Tensor<T> k = kernel::linear<T>(x, p.wk, nullptr);
  const Tensor<T> v = kernel::linear<T>(x, p.wv, nullptr);
  Tensor<T> s = kernel::matmul(q, kernel::transpose(k, {0, 2, 1}));
  detail::softmax_rows(s.ptr(), B * L, L);
  const Tensor<T> o = kernel::matmul(s, v);
  return kernel::linear<T>(o, p.wo, nullptr);
}

// Same function with plain loops; `macs` is bumped inside every
// multiply-accumulate.
template <std::floating_point T>
Tensor<T> attention_forward_naive(const Tensor<T>& x,
                                  const AttentionParams<T>& p,
                                  std::uint64_t& macs) {
  if (x.rank() != 3 || p.wq.shape() != Shape{x.dim(2), x.dim(2)})
    throw ShapeError("attention: input " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), L = x.dim(1), D = x.dim(2);
  auto project = [&](const Tensor<T>& in, const Tensor<T>& w) {
    Tensor<T> out(in.shape());
    for (std::size_t r = 0; r < B * L; ++r)
      for (std::size_t o = 0; o < D; ++o) {
        T acc = 0;
        for (std::size_t i = 0; i < D; ++i) {
          acc += in[r * D + i] * w[o * D + i];
          ++macs;
        }
        out[r * D + o] = acc;
      }
    return out;
  };
  const Tensor<T> q = project(x, p.wq), k = project(x, p.wk),
                  v = project(x, p.wv);
  Tensor<T> s({B, L, L}), o({B, L, D});
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j) {
        T acc = 0;
        for (std::size_t d = 0; d < D; ++d) {
          acc += q[(b * L + i) * D + d] * k[(b * L + j) * D + d];
          ++macs;
        }
        s[(b * L + i) * L + j] = acc;
      }
    detail::softmax_rows(s.ptr() + b * L * L, L, L);
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t d = 0; d < D; ++d) {
        T acc = 0;
        for (std::size_t j = 0; j < L; ++j) {
          acc += s[(b * L + i) * L + j] * v[(b * L + j) * D + d];
          ++macs;
        }
        o[(b * L + i) * D + d] = acc;
      }
  }
  return project(o, p.wo);
}

// ---------------------------------------------------------------------------
// Harness.

struct BenchConfig {
  std::size_t B = 1, C = 24, F = 65, H = 16;
  std::vector<std::size_t> grid = {250, 500, 1000, 2000, 4000};
  std::string direction_set = "10d_tfc";
  std::size_t attention_layers = 1;
  std::size_t attention_k = 2;  // D = C * k
  std::size_t warmup = 2, repeats = 5;
  bool timing = true;  // false: MACs only, wall_ms = 0
  std::uint64_t seed = 17;

  std::size_t attention_width() const { return C * attention_k; }
  void validate() const {
    if (B == 0 || C == 0 || F == 0 || H == 0 || grid.empty())
      throw ContractError("bench: dimensions and grid must be non-empty");
    for (std::size_t t : grid)
      if (t == 0) throw ContractError("bench: grid values must be positive");
    if (warmup < 2 || repeats < 5)
      throw ContractError("bench: need >= 2 warmups and >= 5 repeats");
    if (attention_layers == 0 || attention_k == 0)
      throw ContractError("bench: attention layers and k must be positive");
    DirectionSet::preset(direction_set);
  }
};

struct BenchRow {
  std::string mechanism;  // "oa" or "self_attention"
  std::size_t B = 0, C = 0, F = 0, T = 0, H = 0;
  std::uint64_t macs = 0;
  double wall_ms = 0;
  std::size_t repeats = 0;
};

template <class Fn>
double median_ms(Fn&& fn, std::size_t warmup, std::size_t repeats) {
  for (std::size_t i = 0; i < warmup; ++i) fn();
  std::vector<double> ms;
  for (std::size_t i = 0; i < repeats; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    ms.push_back(std::chrono::duration<double, std::milli>(
                     std::chrono::steady_clock::now() - t0)
                     .count());
  }
  std::sort(ms.begin(), ms.end());
  const std::size_t n = ms.size();
  return n % 2 ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);
}

inline std::vector<BenchRow> run_benchmark(const BenchConfig& cfg) {
  cfg.validate();
  const OAConfig oa = bench_oa_config(cfg.C, cfg.H, cfg.direction_set);
  Rng rng(cfg.seed);
  ParamStore<double> store;
  init_oa(store, "oa", oa, rng);
  const std::size_t D = cfg.attention_width();
  const AttentionParams<double> att = make_attention_params<double>(D, rng);
  std::vector<BenchRow> rows;
  for (std::size_t T : cfg.grid) {
    BenchRow r{"oa", cfg.B, cfg.C, cfg.F, T, cfg.H,
               count_macs_oa(cfg.B, cfg.C, cfg.F, T, cfg.H, cfg.direction_set),
               0.0, 0};
    if (cfg.timing) {
      const Tensor<double> z =
          init::uniform<double>({cfg.B, cfg.C, cfg.F, T}, 1.0, rng);
      const BoundParams<double> bound(store, nullptr);
      const Scope<double> scope(bound, "oa.");
      r.wall_ms = median_ms(
          [&] { (void)oa_forward(scope, oa, constant(z)); }, cfg.warmup,
          cfg.repeats);
      r.repeats = cfg.repeats;
    }
    rows.push_back(r);
    BenchRow a{"self_attention", cfg.B, cfg.C, cfg.F, T, cfg.H,
               count_macs_attention(cfg.B, cfg.attention_layers, T, D), 0.0, 0};
    if (cfg.timing) {
      const Tensor<double> x = init::uniform<double>({cfg.B, T, D}, 1.0, rng);
      a.wall_ms = median_ms(
          [&] {
            Tensor<double> h = x;
            for (std::size_t l = 0; l < cfg.attention_layers; ++l)
              h = attention_forward(h, att);
          },
          cfg.warmup, cfg.repeats);
      a.repeats = cfg.repeats;
    }
    rows.push_back(a);
  }
  return rows;
}

// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x,
                           const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2)
    throw ContractError("loglog_slope: need >= 2 paired points");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= double(x.size());
  my /= double(x.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  if (sxx == 0) throw ContractError("loglog_slope: x values are all equal");
  return sxy / sxx;
}

// Smallest T at which the attention count exceeds the OA count, if any
// below `limit`.
inline std::optional<std::uint64_t> crossover_T(const BenchConfig& cfg,
                                                std::uint64_t limit = 1u << 26) {
  auto attn_wins = [&](std::uint64_t T) {
    return count_macs_attention(cfg.B, cfg.attention_layers, T,
                                cfg.attention_width()) >
           count_macs_oa(cfg.B, cfg.C, cfg.F, T, cfg.H, cfg.direction_set);
  };
  if (attn_wins(1)) return 1;
  std::uint64_t hi = 2;
  while (!attn_wins(hi)) {
    if (hi >= limit) return std::nullopt;
    hi *= 2;
  }
  std::uint64_t lo = hi / 2;  // attention does not win at lo
  while (hi - lo > 1) {
    const std::uint64_t mid = lo + (hi - lo) / 2;
    (attn_wins(mid) ? hi : lo) = mid;
  }
  return hi;
}

struct BenchSummary {
  double oa_slope = 0, attention_slope = 0;
  // OA wall-clock ratio between consecutive grid points, keyed by the
  // smaller T.
  std::vector<std::pair<std::size_t, double>> oa_wall_ratios;
  std::optional<std::uint64_t> crossover;
};

inline BenchSummary summarize(const BenchConfig& cfg,
                              const std::vector<BenchRow>& rows) {
  BenchSummary s;
  std::vector<double> t_oa, m_oa, t_at, m_at;
  std::vector<const BenchRow*> oa_rows;
  for (const auto& r : rows) {
    if (r.mechanism == "oa") {
      t_oa.push_back(double(r.T));
      m_oa.push_back(double(r.macs));
      oa_rows.push_back(&r);
    } else {
      t_at.push_back(double(r.T));
      m_at.push_back(double(r.macs));
    }
  }
  if (t_oa.size() >= 2) s.oa_slope = loglog_slope(t_oa, m_oa);
  if (t_at.size() >= 2) s.attention_slope = loglog_slope(t_at, m_at);
  for (std::size_t i = 0; i + 1 < oa_rows.size(); ++i)
    if (oa_rows[i]->wall_ms > 0)
      s.oa_wall_ratios.emplace_back(oa_rows[i]->T,
                                    oa_rows[i + 1]->wall_ms / oa_rows[i]->wall_ms);
  s.crossover = crossover_T(cfg);
  return s;
}

inline void write_csv(std::ostream& os, const std::vector<BenchRow>& rows) {
  os << "mechanism,B,C,F,T,H,macs,wall_ms,repeats\n";
  for (const auto& r : rows) {
    char ms[64];
    std::snprintf(ms, sizeof ms, "%.4f", r.wall_ms);
    os << r.mechanism << ',' << r.B << ',' << r.C << ',' << r.F << ',' << r.T
       << ',' << r.H << ',' << r.macs << ',' << ms << ',' << r.repeats << '\n';
  }
}

}  // namespace omniscan::bench
