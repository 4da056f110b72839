// Copyright 2026 The omniscan Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <gtest/gtest.h>

#include <sstream>

#include "omniscan/bench.hpp"
#include "test_util.hpp"

namespace omniscan::bench {
namespace {

TEST(Macs, OaDoublingIsLinear) {
  for (const char* set : {"4d_tf", "6d_tfc", "8d_tf", "10d_tfc"})
    for (std::uint64_t T0 : {64u, 100u, 250u, 1000u, 4000u}) {
      const double r = double(count_macs_oa(1, 24, 65, 2 * T0, 16, set)) /
                       double(count_macs_oa(1, 24, 65, T0, 16, set));
      EXPECT_LE(r, 2.05) << set << " T0=" << T0;
      EXPECT_GE(r, 1.95) << set << " T0=" << T0;
    }
}

TEST(Macs, AdditiveOverDirections) {
  const OAConfig c4 = bench_oa_config(24, 16, "4d_tf");
  for (std::uint64_t T : {1u, 7u, 63u, 500u}) {
    const std::uint64_t per = oa_direction_macs(2, 65, T, c4);
    EXPECT_EQ(count_macs_oa(2, 24, 65, T, 16, "8d_tf") -
                  count_macs_oa(2, 24, 65, T, 16, "4d_tf"),
              4 * per);
    EXPECT_EQ(count_macs_oa(2, 24, 65, T, 16, "10d_tfc") -
                  count_macs_oa(2, 24, 65, T, 16, "6d_tfc"),
              4 * per);
  }
  EXPECT_THROW(count_macs_oa(0, 24, 65, 10, 16, "4d_tf"), ContractError);
  EXPECT_THROW(count_macs_oa(1, 24, 65, 10, 16, "3d"), ContractError);
}

// Every kernel reports its multiply-accumulates; the closed form must agree
// with what a real forward pass executes.
TEST(Macs, OaMatchesInstrumentedForward) {
  Rng rng(1);
  for (const char* set : {"4d_tf", "6d_tfc", "8d_tf", "10d_tfc"})
    for (bool fold : {false, true}) {
      OAConfig cfg = bench_oa_config(6, 4, set);
      cfg.fold_transposed = fold;
      ParamStore<double> store;
      init_oa(store, "oa", cfg, rng);
      const BoundParams<double> bound(store, nullptr);
      const Tensor<double> z = testing::rand_tensor({2, 6, 5, 9}, rng);
      MacCounter counter;
      (void)oa_forward(Scope<double>(bound, "oa."), cfg, constant(z));
      EXPECT_EQ(counter.count(), oa_macs(2, 5, 9, cfg)) << set << " fold=" << fold;
      // The mechanism count is the unfolded one.
      if (!fold) EXPECT_EQ(counter.count(), count_macs_oa(2, 6, 5, 9, 4, set)) << set;
      const std::size_t n = cfg.directions.tf_directions.size();
      EXPECT_EQ(scanned_directions(cfg), fold && n == 8 ? 4u : n) << set;
    }
}

TEST(Macs, AttentionMatchesInstrumentedForward) {
  Rng rng(2);
  for (std::size_t T : {1u, 5u, 33u}) {
    const std::size_t D = 12;
    const AttentionParams<double> p = make_attention_params<double>(D, rng);
    const Tensor<double> x = testing::rand_tensor({2, T, D}, rng);
    std::uint64_t naive = 0;
    const Tensor<double> ref = attention_forward_naive(x, p, naive);
    EXPECT_EQ(naive, count_macs_attention(2, 1, T, D));
    MacCounter counter;
    const Tensor<double> fast = attention_forward(x, p);
    EXPECT_EQ(counter.count(), naive);
    for (std::size_t i = 0; i < ref.size(); ++i)
      EXPECT_NEAR(fast[i], ref[i], 1e-12);
  }
}

TEST(Macs, AttentionExamples) {
  EXPECT_EQ(count_macs_attention(1, 1, 1, 64), 4u * 64 * 64 + 2 * 64);
  EXPECT_EQ(count_macs_attention(3, 2, 10, 8), 6u * (4 * 10 * 64 + 2 * 100 * 8));
  auto ratio = [](std::uint64_t T0) {
    return double(count_macs_attention(1, 1, 2 * T0, 64)) /
           double(count_macs_attention(1, 1, T0, 64));
  };
  EXPECT_DOUBLE_EQ(ratio(1024), 8704.0 / 2304.0);
  double prev = 0;
  for (std::uint64_t T0 = 64; T0 <= (1u << 20); T0 *= 2) {
    EXPECT_GT(ratio(T0), prev);
    EXPECT_LT(ratio(T0), 4.0);
    prev = ratio(T0);
  }
  for (std::uint64_t T0 : {1152u, 2048u, 4096u, 100000u})
    EXPECT_GE(ratio(T0), 0.95 * 4.0) << T0;
  EXPECT_LT(ratio(1151), 0.95 * 4.0);
  EXPECT_THROW(count_macs_attention(1, 1, 0, 64), ContractError);
}

TEST(Harness, MacsOnlyRunHasTwoRowsPerGridPoint) {
  BenchConfig cfg;
  cfg.timing = false;
  const auto rows = run_benchmark(cfg);
  ASSERT_EQ(rows.size(), 2 * cfg.grid.size());
  for (std::size_t i = 0; i < cfg.grid.size(); ++i) {
    EXPECT_EQ(rows[2 * i].mechanism, "oa");
    EXPECT_EQ(rows[2 * i + 1].mechanism, "self_attention");
    EXPECT_EQ(rows[2 * i].T, cfg.grid[i]);
    EXPECT_EQ(rows[2 * i].wall_ms, 0.0);
  }
  const BenchSummary s = summarize(cfg, rows);
  EXPECT_NEAR(s.oa_slope, 1.0, 0.01);
  EXPECT_GE(s.attention_slope, 1.8);
  ASSERT_TRUE(s.crossover.has_value());
  const std::uint64_t x = *s.crossover;
  const std::size_t D = cfg.attention_width();
  EXPECT_GT(count_macs_attention(1, 1, x, D), count_macs_oa(1, 24, 65, x, 16, "10d_tfc"));
  EXPECT_LE(count_macs_attention(1, 1, x - 1, D),
            count_macs_oa(1, 24, 65, x - 1, 16, "10d_tfc"));
  // Same inputs, same bytes.
  std::ostringstream a, b;
  write_csv(a, rows);
  write_csv(b, run_benchmark(cfg));
  EXPECT_EQ(a.str(), b.str());
}

TEST(Harness, TimedRunOnTinyGrid) {
  BenchConfig cfg;
  cfg.C = 4;
  cfg.F = 5;
  cfg.H = 4;
  cfg.grid = {8, 16};
  const auto rows = run_benchmark(cfg);
  for (const auto& r : rows) {
    EXPECT_GT(r.wall_ms, 0.0);
    EXPECT_EQ(r.repeats, 5u);
  }
  EXPECT_EQ(summarize(cfg, rows).oa_wall_ratios.size(), 1u);
}

TEST(Harness, RejectsBadConfig) {
  BenchConfig cfg;
  cfg.warmup = 1;
  EXPECT_THROW(run_benchmark(cfg), ContractError);
  cfg = {};
  cfg.repeats = 4;
  EXPECT_THROW(run_benchmark(cfg), ContractError);
  cfg = {};
  cfg.grid = {};
  EXPECT_THROW(run_benchmark(cfg), ContractError);
  cfg = {};
  cfg.direction_set = "5d";
  EXPECT_THROW(run_benchmark(cfg), ContractError);
}

TEST(Harness, LogLogSlope) {
  EXPECT_NEAR(loglog_slope({1, 2, 4, 8}, {3, 12, 48, 192}), 2.0, 1e-12);
  EXPECT_NEAR(loglog_slope({10, 100}, {5, 50}), 1.0, 1e-12);
  EXPECT_THROW(loglog_slope({1}, {1}), ContractError);
  EXPECT_THROW(loglog_slope({2, 2}, {1, 3}), ContractError);
}

}  // namespace
}  // namespace omniscan::bench
