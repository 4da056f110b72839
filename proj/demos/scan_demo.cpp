// Copyright 2026 The omniscan Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Shows how each scan direction serializes a tiny (F=2, T=3) grid, then runs
// one OA layer on a random feature map and reports its MAC count.

#include <cstdio>
#include <iostream>

#include "omniscan/omniscan.hpp"

using namespace omniscan;

int main() {
  // Grid values encode position: 10*f + t.
  Tensor<double> grid({1, 1, 2, 3});
  for (std::size_t f = 0; f < 2; ++f)
    for (std::size_t t = 0; t < 3; ++t) grid[f * 3 + t] = 10.0 * f + t;
  const Var<double> z = constant(grid);

  std::cout << "grid (rows are F, columns are T):\n  0  1  2\n 10 11 12\n\n";
  for (const auto& set : {"4d_tf", "8d_tf"}) {
    std::cout << set << ", row span:\n";
    for (const ScanDirection& d : DirectionSet::preset(set).tf_directions) {
      const auto s = serialize_direction(z, d);
      const std::size_t R = s.sequences.dim(0), L = s.sequences.dim(1);
      std::printf("  %-4s", d.name().c_str());
      for (std::size_t r = 0; r < R; ++r) {
        std::printf(" [");
        for (std::size_t l = 0; l < L; ++l)
          std::printf(l ? " %2.0f" : "%2.0f", s.sequences.value()[r * L + l]);
        std::printf("]");
      }
      std::printf("\n");
    }
  }
  std::cout << "grid span, T forward:";
  const auto g = serialize_direction(z, {Axis::kT, Orientation::kForward}, ScanSpan::kGrid);
  for (double v : g.sequences.value().data()) std::printf(" %2.0f", v);
  std::cout << "\n\n";

  // One OA layer, C=8, H=4, on a (1, 8, 16, 50) feature map.
  const OAConfig cfg = oa_config(8, 4, DirectionSet::preset("10d_tfc"));
  Rng rng(17);
  ParamStore<double> store;
  init_oa(store, "oa", cfg, rng);
  const BoundParams<double> bound(store, nullptr);
  const Tensor<double> x = init::uniform<double>({1, 8, 16, 50}, 1.0, rng);
  MacCounter macs;
  const Var<double> y = oa_forward(Scope<double>(bound, "oa."), cfg, constant(x));
  std::cout << "OA 10d_tfc: " << store.count() << " parameters, output "
            << shape_str(y.shape()) << ", " << macs.count() << " MACs (closed form "
            << oa_macs(1, 16, 50, cfg) << ")\n";
  return 0;
}
