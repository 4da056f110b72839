// Copyright 2026 The omniscan Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Fused selective-scan kernels (see ssm.hpp for the math). Compiled in a
// separate translation unit so the inner loops vectorize.

#pragma once

#include <cstddef>

namespace omniscan::kernel {

// u, delta: (N, L, E); A: (E, H); B, C: (N, L, H); D: (E). Row-major.
template <class T>
struct ScanRefs {
  const T* u;
  const T* delta;
  const T* A;
  const T* B;
  const T* C;
  const T* D;
  std::size_t N, L, E, H;
};

// Writes y: (N, L, E).
void selective_scan_fwd(const ScanRefs<double>& s, double* y);
void selective_scan_fwd(const ScanRefs<float>& s, float* y);

// Accumulates (+=) into gA and gD and writes gu, gdelta, gB, gC. All output
// buffers must be zero-initialized by the caller.
template <class T>
struct ScanGradRefs {
  T* u;
  T* delta;
  T* A;
  T* B;
  T* C;
  T* D;
};

void selective_scan_bwd(const ScanRefs<double>& s, const double* gy,
                        const ScanGradRefs<double>& g);
void selective_scan_bwd(const ScanRefs<float>& s, const float* gy,
                        const ScanGradRefs<float>& g);

}  // namespace omniscan::kernel
