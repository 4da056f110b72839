// Copyright 2026 The omniscan Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Array math kernels compiled in their own translation unit so the compiler
// may use vectorized libm entry points. Callers guarantee finite inputs.

#pragma once

#include <cstddef>

namespace omniscan::vmath {

void exp(const double* in, double* out, std::size_t n);
void exp(const float* in, float* out, std::size_t n);

// out = x * sigmoid(x)
void silu(const double* in, double* out, std::size_t n);
void silu(const float* in, float* out, std::size_t n);

// out = sigmoid(x)
void sigmoid(const double* in, double* out, std::size_t n);
void sigmoid(const float* in, float* out, std::size_t n);

// out = log(1 + exp(x)), identity above 30
void softplus(const double* in, double* out, std::size_t n);
void softplus(const float* in, float* out, std::size_t n);

}  // namespace omniscan::vmath
