// Copyright 2026 The omniscan Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Built with -ffast-math (see CMakeLists.txt). Nothing here may depend on
// NaN/Inf semantics or on a particular summation order.

#include "omniscan/vmath.hpp"

#include <cmath>

namespace omniscan::vmath {
namespace {

template <class T>
void exp_impl(const T* __restrict in, T* __restrict out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(in[i]);
}

// exp(-|x|) keeps every branch bounded.
template <class T>
void sigmoid_impl(const T* __restrict in, T* __restrict out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const T x = in[i];
    const T e = std::exp(-std::abs(x));
    const T r = T(1) / (T(1) + e);
    out[i] = x >= 0 ? r : e * r;
  }
}

template <class T>
void silu_impl(const T* __restrict in, T* __restrict out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const T x = in[i];
    const T e = std::exp(-std::abs(x));
    const T r = T(1) / (T(1) + e);
    out[i] = x * (x >= 0 ? r : e * r);
  }
}

// log1p(exp(-|x|)) + max(x, 0); the log term is below 1e-13 past 30.
template <class T>
void softplus_impl(const T* __restrict in, T* __restrict out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const T x = in[i];
    const T y = std::log1p(std::exp(-std::abs(x))) + (x > 0 ? x : T(0));
    out[i] = x > T(30) ? x : y;
  }
}

}  // namespace

void exp(const double* in, double* out, std::size_t n) { exp_impl(in, out, n); }
void exp(const float* in, float* out, std::size_t n) { exp_impl(in, out, n); }
void silu(const double* in, double* out, std::size_t n) { silu_impl(in, out, n); }
void silu(const float* in, float* out, std::size_t n) { silu_impl(in, out, n); }
void sigmoid(const double* in, double* out, std::size_t n) {
  sigmoid_impl(in, out, n);
}
void sigmoid(const float* in, float* out, std::size_t n) {
  sigmoid_impl(in, out, n);
}
void softplus(const double* in, double* out, std::size_t n) {
  softplus_impl(in, out, n);
}
void softplus(const float* in, float* out, std::size_t n) {
  softplus_impl(in, out, n);
}

}  // namespace omniscan::vmath
