// Copyright 2026 The omniscan Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <sstream>

#include "omniscan/autodiff.hpp"
#include "omniscan/kernels.hpp"
#include "omniscan/tensor.hpp"
#include "test_util.hpp"

namespace omniscan {
namespace {

using testing::op_grad_error;
using testing::rand_tensor;
using TD = Tensor<double>;

TEST(Elementwise, AddAndMulExamples) {
  const TD a = TD::vector({1, 2}), b = TD::vector({3, 4});
  EXPECT_EQ(kernel::binary(kernel::BinaryOp::kAdd, a, b), TD::vector({4, 6}));
  EXPECT_EQ(kernel::binary(kernel::BinaryOp::kMul, TD::vector({2, 3}), TD::scalar(0)),
            TD::vector({0, 0}));
  const TD c = kernel::binary(kernel::BinaryOp::kMul, TD({2, 1, 4}, 1.0), TD({2, 3, 4}, 2.0));
  EXPECT_EQ(c.shape(), (Shape{2, 3, 4}));
}

TEST(Elementwise, BroadcastMatchesMaterializedExpansion) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<std::size_t> U(1, 4);
    const Shape full = {U(rng), U(rng), U(rng)};
    Shape small = full;
    for (auto& d : small)
      if (rng() % 2) d = 1;
    const TD a = rand_tensor(full, rng), b = rand_tensor(small, rng);
    TD expanded(full);
    for (std::size_t i = 0; i < full[0]; ++i)
      for (std::size_t j = 0; j < full[1]; ++j)
        for (std::size_t k = 0; k < full[2]; ++k)
          expanded(i, j, k) = b(small[0] == 1 ? 0 : i, small[1] == 1 ? 0 : j,
                                small[2] == 1 ? 0 : k);
    for (auto op : {kernel::BinaryOp::kAdd, kernel::BinaryOp::kMul}) {
      EXPECT_EQ(kernel::binary(op, a, b), kernel::binary(op, a, expanded));
      EXPECT_EQ(kernel::binary(op, b, a), kernel::binary(op, expanded, a));
    }
  }
}

TEST(Elementwise, UnresolvableBroadcastThrows) {
  EXPECT_THROW(kernel::binary(kernel::BinaryOp::kAdd, TD({2, 3}), TD({3, 2})), ShapeError);
}

TEST(Unary, Examples) {
  const Var<double> z = constant(TD::vector({0}));
  EXPECT_EQ(exp(z).value()[0], 1.0);
  EXPECT_EQ(silu(z).value()[0], 0.0);
  EXPECT_NEAR(softplus(z).value()[0], std::log(2.0), 1e-15);
  EXPECT_EQ(negate(constant(TD::vector({2}))).value()[0], -2.0);
}

TEST(Unary, LargeArgumentsStayFinite) {
  const Var<double> x = constant(TD::vector({-800, -40, 40, 800}));
  EXPECT_TRUE(softplus(x).value().all_finite());
  EXPECT_TRUE(sigmoid(x).value().all_finite());
  EXPECT_TRUE(silu(x).value().all_finite());
  EXPECT_NEAR(softplus(x).value()[3], 800.0, 1e-12);
}

TEST(Matmul, Examples) {
  const TD eye({2, 2}, std::vector<double>{1, 0, 0, 1});
  const TD m({2, 2}, std::vector<double>{1, 2, 3, 4});
  EXPECT_EQ(kernel::matmul(eye, m), m);
  EXPECT_EQ(kernel::matmul(TD({1, 2}, std::vector<double>{1, 2}),
                           TD({2, 1}, std::vector<double>{3, 4})),
            TD({1, 1}, std::vector<double>{11}));
  Rng rng(2);
  EXPECT_EQ(kernel::matmul(TD({3, 4}), rand_tensor({4, 2}, rng)), TD({3, 2}));
  EXPECT_THROW(kernel::matmul(TD({2, 3}), TD({2, 3})), ShapeError);
}

TEST(AxisOps, FlipExamplesAndInvolution) {
  EXPECT_EQ(kernel::flip(TD::vector({1, 2, 3}), 0), TD::vector({3, 2, 1}));
  Rng rng(3);
  const TD x = rand_tensor({2, 3, 4, 5}, rng);
  for (std::size_t ax = 0; ax < 4; ++ax)
    EXPECT_EQ(kernel::flip(kernel::flip(x, ax), ax), x);
  EXPECT_THROW(kernel::flip(x, 4), ShapeError);
}

TEST(AxisOps, StackSumSplitTranspose) {
  Rng rng(4);
  const TD a = rand_tensor({3, 4}, rng), b = rand_tensor({3, 4}, rng);
  const std::vector<const TD*> ab = {&a, &b};
  const TD s = kernel::sum_axis(kernel::stack<double>(ab, 0), 0);
  EXPECT_EQ(s, kernel::binary(kernel::BinaryOp::kAdd, a, b));
  const TD x = rand_tensor({2, 6, 3}, rng);
  const auto parts = kernel::split(x, 1, 3);
  ASSERT_EQ(parts.size(), 3u);
  for (std::size_t p = 0; p < 3; ++p)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j)
        for (std::size_t k = 0; k < 3; ++k)
          EXPECT_EQ(parts[p](i, j, k), x(i, 2 * p + j, k));
  const TD t = kernel::transpose(x, {2, 0, 1});
  EXPECT_EQ(t.shape(), (Shape{3, 2, 6}));
  EXPECT_EQ(kernel::transpose(t, {1, 2, 0}), x);
  EXPECT_THROW(kernel::split(x, 1, 4), ShapeError);
  EXPECT_THROW(kernel::sum_axis(x, 3), ShapeError);
}

TEST(Conv1x1, IdentityAndZero) {
  Rng rng(5);
  const TD x = rand_tensor({2, 3, 4, 5}, rng);
  TD eye({3, 3});
  for (std::size_t i = 0; i < 3; ++i) eye(i, i) = 1;
  const TD zb({3});
  EXPECT_EQ(kernel::conv1x1(x, eye, &zb), x);
  EXPECT_EQ(kernel::conv1x1(TD({2, 3, 4, 5}), rand_tensor({3, 3}, rng), &zb),
            TD({2, 3, 4, 5}));
  EXPECT_THROW(kernel::conv1x1(x, TD({3, 2}), &zb), ShapeError);
}

TEST(MeanPool, Examples) {
  EXPECT_EQ(kernel::mean_pool_ft(TD({2, 3, 4, 5}, 0.75)), TD({2, 1, 3}, 0.75));
  TD x({1, 2, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) x[4 + i] = double(i + 1);
  EXPECT_EQ(kernel::mean_pool_ft(x)(0, 0, 1), 2.5);
  EXPECT_EQ(kernel::mean_pool_ft(TD({2, 24, 65, 100})).shape(), (Shape{2, 1, 24}));
}

TEST(Backward, Examples) {
  Tape<double> tape;
  const Var<double> x = tape.leaf(TD({2, 3}, 0.5));
  tape.backward(sum_all(x));
  EXPECT_EQ(*tape.grad(x), TD({2, 3}, 1.0));

  Tape<double> t2;
  const Var<double> y = t2.leaf(TD::vector({1, 2}));
  t2.backward(sum_all(mul(y, y)));
  EXPECT_EQ(*t2.grad(y), TD::vector({2, 4}));

  Tape<double> t3;
  const Var<double> z = t3.leaf(TD::vector({1, 2}));
  EXPECT_THROW(t3.backward(mul(z, z)), ContractError);
}

// Every differentiable op against central differences on inputs in [-1, 1].
TEST(Gradients, EveryOpMatchesFiniteDifferences) {
  Rng rng(6);
  const double tol = 1e-6;
  auto r = [&](Shape s) { return rand_tensor(std::move(s), rng); };
  using V = std::vector<Var<double>>;
  EXPECT_LE(op_grad_error({r({2, 3}), r({2, 3})}, [](const V& x) { return add(x[0], x[1]); }), tol);
  EXPECT_LE(op_grad_error({r({2, 3}), r({1, 3})}, [](const V& x) { return add(x[0], x[1]); }), tol);
  EXPECT_LE(op_grad_error({r({2, 3}), r({2, 1})}, [](const V& x) { return sub(x[0], x[1]); }), tol);
  EXPECT_LE(op_grad_error({r({2, 1, 4}), r({2, 3, 4})}, [](const V& x) { return mul(x[0], x[1]); }), tol);
  EXPECT_LE(op_grad_error({r({5})}, [](const V& x) { return scale(x[0], 2.5); }), tol);
  EXPECT_LE(op_grad_error({r({5})}, [](const V& x) { return negate(x[0]); }), tol);
  EXPECT_LE(op_grad_error({r({6})}, [](const V& x) { return exp(x[0]); }), tol);
  EXPECT_LE(op_grad_error({r({6})}, [](const V& x) { return softplus(x[0]); }), tol);
  EXPECT_LE(op_grad_error({r({6})}, [](const V& x) { return sigmoid(x[0]); }), tol);
  EXPECT_LE(op_grad_error({r({6})}, [](const V& x) { return silu(x[0]); }), tol);
  EXPECT_LE(op_grad_error({r({3, 4}), r({4, 2})}, [](const V& x) { return matmul(x[0], x[1]); }), tol);
  EXPECT_LE(op_grad_error({r({2, 5, 4}), r({3, 4})}, [](const V& x) { return linear(x[0], x[1]); }), tol);
  EXPECT_LE(op_grad_error({r({2, 5, 4}), r({3, 4}), r({3})},
                          [](const V& x) { return linear(x[0], x[1], x[2]); }), tol);
  EXPECT_LE(op_grad_error({r({2, 3, 4, 5}), r({2, 3}), r({2})},
                          [](const V& x) { return conv1x1(x[0], x[1], x[2]); }), tol);
  EXPECT_LE(op_grad_error({r({2, 7, 3}), r({3, 4}), r({3})},
                          [](const V& x) { return causal_depthwise_conv(x[0], x[1], x[2]); }), tol);
  EXPECT_LE(op_grad_error({r({2, 6})}, [](const V& x) { return reshape(x[0], {3, 4}); }), tol);
  EXPECT_LE(op_grad_error({r({2, 3, 4})}, [](const V& x) { return flip(x[0], 1); }), tol);
  EXPECT_LE(op_grad_error({r({2, 3, 4})}, [](const V& x) { return transpose(x[0], {2, 0, 1}); }), tol);
  EXPECT_LE(op_grad_error({r({2, 3}), r({2, 3})}, [](const V& x) { return stack({x[0], x[1]}, 1); }), tol);
  EXPECT_LE(op_grad_error({r({2, 3, 4})}, [](const V& x) { return sum(x[0], 1); }), tol);
  EXPECT_LE(op_grad_error({r({2, 6, 3})}, [](const V& x) {
              auto p = split(x[0], 1, 3);
              return add(mul(p[0], p[1]), p[2]);
            }), tol);
  EXPECT_LE(op_grad_error({r({2, 3, 4, 5})}, [](const V& x) { return mean_pool_ft(x[0]); }), tol);
  auto idx = std::make_shared<std::vector<std::uint32_t>>(std::vector<std::uint32_t>{5, 0, 3, 3, 1});
  EXPECT_LE(op_grad_error({r({2, 3})}, [&](const V& x) { return gather(x[0], idx, {5}); }), tol);
  EXPECT_LE(op_grad_error({r({2, 3, 4, 5}), r({3}), r({3})},
                          [](const V& x) { return layer_norm_channels(x[0], x[1], x[2]); }), tol);
  EXPECT_LE(op_grad_error({r({2, 3, 4, 5}), r({3}), r({3})},
                          [](const V& x) { return layer_norm_frames(x[0], x[1], x[2]); }), tol);
}

TEST(Bijections, RoundTripsAreBitwise) {
  Rng rng(7);
  const TD x = rand_tensor({2, 3, 4}, rng);
  EXPECT_EQ(kernel::transpose(kernel::transpose(x, {1, 2, 0}), {2, 0, 1}), x);
  const auto parts = kernel::split(x, 2, 2);
  const std::vector<const TD*> ps = {&parts[0], &parts[1]};
  const TD st = kernel::stack<double>(ps, 3);  // (2, 3, 2, 2)
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      for (std::size_t k = 0; k < 4; ++k)
        EXPECT_EQ(st(i, j, k % 2, k / 2), x(i, j, k));
}

TEST(Serialization, TensorBinaryRoundTrip) {
  Rng rng(8);
  const TD x = rand_tensor({3, 1, 4}, rng);
  std::stringstream ss;
  write_tensor(ss, x);
  EXPECT_EQ(read_tensor<double>(ss), x);
  std::stringstream bad("garbage");
  EXPECT_THROW(read_tensor<double>(bad), FormatError);
}

TEST(Determinism, SameInputsSameBits) {
  Rng r1(9), r2(9);
  const TD a = rand_tensor({4, 5}, r1), b = rand_tensor({4, 5}, r2);
  EXPECT_EQ(a, b);
  EXPECT_EQ(kernel::matmul(a, kernel::transpose(a, {1, 0})),
            kernel::matmul(b, kernel::transpose(b, {1, 0})));
}

}  // namespace
}  // namespace omniscan
