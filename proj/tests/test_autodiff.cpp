// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "advlm/tensor.hpp"
#include "fd.hpp"

using namespace advlm;
using advlm::testing::numeric_grad;
using advlm::testing::random_tensor;
using advlm::testing::rel_err;

namespace {

void expect_values(const Tensor& t, std::initializer_list<double> want, double tol = 0.0) {
  ASSERT_EQ(t.size(), want.size());
  std::size_t i = 0;
  for (double w : want) EXPECT_NEAR(t[i++], w, tol) << "index " << i - 1;
}

}  // namespace

TEST(Matmul, IdentityTimesColumn) {
  Tape tape;
  auto out = tape.matmul(Tensor::matrix({{1, 0}, {0, 1}}), Tensor::matrix({{2}, {3}}));
  EXPECT_EQ(out.shape(), (Shape{2, 1}));
  expect_values(out, {2, 3});
}

TEST(Matmul, RowTimesColumn) {
  Tape tape;
  auto out = tape.matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}}));
  expect_values(out, {11});
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape tape;
  try {
    tape.matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3] x [2x3]"), std::string::npos) << e.what();
  }
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  auto a = random_tensor({3, 3}, rng);
  auto b = random_tensor({3, 3}, rng);
  Tape tape;
  auto loss = tape.sum(tape.matmul(a, b));
  tape.backward(loss);
  auto f = [&] {
    Tape t(false);
    return t.sum(t.matmul(a, b)).item();
  };
  EXPECT_LT(rel_err(a.grad(), numeric_grad(a, f)), 1e-4);
  EXPECT_LT(rel_err(b.grad(), numeric_grad(b, f)), 1e-4);
}

TEST(MatmulBt, EqualsMatmulWithTranspose) {
  std::mt19937_64 rng(8);
  auto a = random_tensor({4, 3}, rng);
  auto b = random_tensor({5, 3}, rng);
  std::vector<double> bt(15);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) bt[j * 5 + i] = b.at(i, j);
  Tape tape(false);
  auto x = tape.matmul_bt(a, b);
  auto y = tape.matmul(a, Tensor::matrix(3, 5, bt));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(x[i], y[i]);
}

TEST(Elementwise, KnownValues) {
  Tape tape;
  expect_values(tape.tanh(Tensor::scalar(0.0)), {0.0});
  expect_values(tape.sigmoid(Tensor::scalar(0.0)), {0.5});
  expect_values(tape.exp(Tensor::scalar(0.0)), {1.0});
  expect_values(tape.log(Tensor::scalar(1.0)), {0.0});
}

TEST(Elementwise, TanhDerivativeMatchesFiniteDifferences) {
  auto x = Tensor::scalar(0.3, true);
  Tape tape;
  tape.backward(tape.tanh(x));
  auto g = numeric_grad(x, [&] { return Tape(false).tanh(x).item(); });
  EXPECT_LT(std::abs(x.grad()[0] - g[0]) / std::abs(g[0]), 1e-4);
}

TEST(Elementwise, LogOfNonPositiveIsDomainError) {
  Tape tape;
  EXPECT_THROW(tape.log(Tensor::vector({1.0, 0.0})), DomainError);
  EXPECT_THROW(tape.log(Tensor::scalar(-3.0)), DomainError);
}

TEST(Elementwise, BinaryShapeMismatch) {
  Tape tape;
  EXPECT_THROW(tape.add(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);
  EXPECT_THROW(tape.mul(Tensor::zeros({2, 1}), Tensor::zeros({1, 2})), DimensionError);
}

TEST(LogSumExp, KnownValuesAndStability) {
  Tape tape;
  EXPECT_NEAR(tape.log_sum_exp(Tensor::vector({0, 0})).item(), std::log(2.0), 1e-15);
  const double big = tape.log_sum_exp(Tensor::vector({1000, 1000})).item();
  EXPECT_TRUE(std::isfinite(big));
  EXPECT_NEAR(big, 1000 + std::log(2.0), 1e-12);
}

TEST(LogSumExp, EmptyInputIsDimensionError) {
  // A zero-length vector cannot be constructed at all.
  EXPECT_THROW(Tensor::from({0}, {}), DimensionError);
  Tape tape;
  EXPECT_THROW(tape.log_sum_exp(Tensor::scalar(1.0)), DimensionError);
}

TEST(LogSumExp, GradientIsSoftmax) {
  std::mt19937_64 rng(11);
  auto x = random_tensor({8}, rng);
  Tape tape;
  tape.backward(tape.log_sum_exp(x));
  double z = 0.0;
  for (double v : x.values()) z += std::exp(v);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(x.grad()[i], std::exp(x[i]) / z, 1e-14);
  auto g = numeric_grad(x, [&] { return Tape(false).log_sum_exp(x).item(); });
  EXPECT_LT(rel_err(x.grad(), g), 1e-4);
}

TEST(LogSumExp, RowwiseMatchesPerRowVectorCalls) {
  std::mt19937_64 rng(12);
  auto m = random_tensor({3, 5}, rng, -2, 2, false);
  Tape tape(false);
  auto rows = tape.log_sum_exp(m);
  ASSERT_EQ(rows.shape(), (Shape{3}));
  for (std::size_t i = 0; i < 3; ++i) {
    auto r = tape.log_sum_exp(tape.slice_rows(m, i, 1));
    EXPECT_DOUBLE_EQ(rows[i], r[0]);
  }
}

TEST(L2Norm, KnownValues) {
  Tape tape;
  EXPECT_DOUBLE_EQ(tape.l2_norm(Tensor::vector({3, 4})).item(), 5.0);
}

TEST(L2Norm, OriginHasZeroGradient) {
  auto v = Tensor::vector({0, 0}, true);
  Tape tape;
  auto n = tape.l2_norm(v);
  EXPECT_EQ(n.item(), 0.0);
  tape.backward(n);
  EXPECT_EQ(v.grad()[0], 0.0);
  EXPECT_EQ(v.grad()[1], 0.0);
}

TEST(L2Norm, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  auto v = random_tensor({5}, rng);
  Tape tape;
  tape.backward(tape.l2_norm(v));
  auto g = numeric_grad(v, [&] { return Tape(false).l2_norm(v).item(); });
  EXPECT_LT(rel_err(v.grad(), g), 1e-4);
}

TEST(Detach, StopsGradient) {
  auto x = Tensor::scalar(2.0, true);
  Tape tape;
  auto loss = tape.mul(x, Tape::detach(x));
  tape.backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
}

TEST(Detach, ValuesAreIdentical) {
  std::mt19937_64 rng(14);
  auto t = random_tensor({3, 4}, rng);
  auto d = Tape::detach(t);
  EXPECT_FALSE(d.requires_grad());
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(d[i], t[i]);
}

TEST(Detach, DetachedSubgraphInputGetsExactlyZeroGradient) {
  std::mt19937_64 rng(15);
  auto a = random_tensor({4}, rng);
  auto b = random_tensor({4}, rng);
  Tape tape;
  auto inner = tape.tanh(tape.mul(a, a));
  auto loss = tape.sum(tape.mul(b, Tape::detach(inner)));
  tape.backward(loss);
  for (double g : a.grad()) EXPECT_EQ(g, 0.0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(b.grad()[i], inner[i]);
}

TEST(GatherRows, SelectsRows) {
  Tape tape;
  std::vector<TokenId> ids{2};
  auto out = tape.gather_rows(Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}), ids);
  expect_values(out, {0, 0, 1});
}

TEST(GatherRows, RepeatedIdsAccumulate) {
  auto m = Tensor::zeros({2, 2}, true);
  std::vector<TokenId> ids{0, 0};
  Tape tape;
  tape.backward(tape.sum(tape.gather_rows(m, ids)));
  expect_values(Tensor::vector({m.grad().begin(), m.grad().end()}), {2, 2, 0, 0});
}

TEST(GatherRows, OutOfRangeNamesId) {
  Tape tape;
  std::vector<TokenId> ids{0, 7};
  try {
    tape.gather_rows(Tensor::zeros({3, 2}), ids);
    FAIL();
  } catch (const IndexError& e) {
    EXPECT_NE(std::string(e.what()).find("id 7"), std::string::npos);
  }
}

TEST(GatherRows, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(16);
  auto m = random_tensor({4, 3}, rng);
  auto w = random_tensor({3, 3}, rng, -2, 2, false);
  std::vector<TokenId> ids{3, 1, 3};
  auto f = [&](Tape& t) { return t.sum(t.tanh(t.mul(t.gather_rows(m, ids), w))); };
  Tape tape;
  tape.backward(f(tape));
  auto g = numeric_grad(m, [&] {
    Tape t(false);
    return f(t).item();
  });
  EXPECT_LT(rel_err(m.grad(), g), 1e-4);
}

TEST(Backward, SumGivesOnes) {
  auto x = Tensor::vector({1, 2, 3}, true);
  Tape tape;
  tape.backward(tape.sum(x));
  expect_values(Tensor::vector({x.grad().begin(), x.grad().end()}), {1, 1, 1});
}

TEST(Backward, HalfSquaredNormGivesX) {
  auto x = Tensor::vector({0.5, -1.5, 2.0}, true);
  Tape tape;
  tape.backward(tape.scale(tape.sum(tape.mul(x, x)), 0.5));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], x[i]);
}

TEST(Backward, NonScalarLossIsContractError) {
  auto x = Tensor::vector({1, 2}, true);
  Tape tape;
  auto y = tape.tanh(x);
  EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Backward, LossFromAnotherTapeIsContractError) {
  auto x = Tensor::vector({1, 2}, true);
  Tape a, b;
  auto loss = a.sum(x);
  EXPECT_THROW(b.backward(loss), ContractError);
}

TEST(Backward, RepeatedCallsAccumulateLeafGradients) {
  auto x = Tensor::vector({1, -2}, true);
  Tape tape;
  auto loss = tape.sum(tape.mul(x, x));
  tape.backward(loss);
  tape.backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(x.grad()[1], -8.0);
  x.zero_grad();
  tape.backward(loss);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2.0);
}

TEST(Tape, NonRecordingTapeRecordsNothing) {
  auto x = Tensor::vector({1, 2}, true);
  Tape tape(false);
  auto y = tape.sum(tape.tanh(x));
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(y.requires_grad());
}

TEST(SliceConcat, GradientsRouteBack) {
  std::mt19937_64 rng(17);
  auto a = random_tensor({3, 4}, rng);
  auto f = [&](Tape& t) {
    std::vector<Tensor> parts{t.slice_cols(a, 1, 2), t.slice_cols(a, 0, 2)};
    auto c = t.concat_rows(parts);
    return t.sum(t.mul(t.slice_rows(c, 2, 3), t.tanh(t.slice_rows(c, 1, 3))));
  };
  Tape tape;
  tape.backward(f(tape));
  auto g = numeric_grad(a, [&] {
    Tape t(false);
    return f(t).item();
  });
  EXPECT_LT(rel_err(a.grad(), g), 1e-4);
}

// Property sweep: every differentiable op against central differences on 100
// random inputs in [-2, 2].
class OpGradientSweep : public ::testing::TestWithParam<std::string> {};

TEST_P(OpGradientSweep, MatchesFiniteDifferences) {
  const std::string op = GetParam();
  std::mt19937_64 rng(1000 + std::hash<std::string>{}(op) % 1000);
  for (int trial = 0; trial < 100; ++trial) {
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({3, 4}, rng);
    auto c = random_tensor({4, 2}, rng);
    auto bias = random_tensor({4}, rng);
    auto off = random_tensor({3}, rng);
    std::vector<TokenId> ids{1, 3, 0};
    std::vector<TokenId> rows{2, 0, 2, 1};
    auto f = [&](Tape& t) -> Tensor {
      if (op == "add") return t.sum(t.tanh(t.add(a, b)));
      if (op == "sub") return t.sum(t.tanh(t.sub(a, b)));
      if (op == "mul") return t.sum(t.mul(a, b));
      if (op == "tanh") return t.sum(t.mul(t.tanh(a), b));
      if (op == "sigmoid") return t.sum(t.mul(t.sigmoid(a), b));
      if (op == "exp") return t.sum(t.mul(t.exp(a), b));
      if (op == "log") return t.sum(t.mul(t.log(t.exp(a)), b));
      if (op == "matmul") return t.sum(t.tanh(t.matmul(a, c)));
      if (op == "matmul_bt") return t.sum(t.tanh(t.matmul_bt(a, b)));
      if (op == "add_bias") return t.sum(t.tanh(t.add_bias(a, bias)));
      if (op == "log_sum_exp") return t.sum(t.mul(t.log_sum_exp(a), off));
      if (op == "l2_norm") return t.sum(t.mul(t.l2_norm(a), off));
      if (op == "pick") return t.sum(t.mul(t.pick(a, ids), off));
      if (op == "offset_at") return t.sum(t.log_sum_exp(t.offset_at(a, ids, off)));
      if (op == "gather_rows") return t.sum(t.tanh(t.gather_rows(t.matmul(a, c), rows)));
      ADD_FAILURE() << "unknown op " << op;
      return t.sum(a);
    };
    Tape tape;
    tape.backward(f(tape));
    for (Tensor* x : {&a, &b, &c, &bias, &off}) {
      auto g = numeric_grad(*x, [&] {
        Tape t(false);
        return f(t).item();
      });
      ASSERT_LT(rel_err(x->grad(), g), 1e-4) << op << " trial " << trial;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradientSweep,
                         ::testing::Values("add", "sub", "mul", "tanh", "sigmoid", "exp", "log",
                                           "matmul", "matmul_bt", "add_bias", "log_sum_exp",
                                           "l2_norm", "pick", "offset_at", "gather_rows"));

TEST(LogSumExp, ShiftInvariance) {
  std::mt19937_64 rng(18);
  std::uniform_real_distribution<double> shift(-50, 50);
  Tape tape(false);
  for (int trial = 0; trial < 100; ++trial) {
    auto x = random_tensor({6}, rng, -2, 2, false);
    const double c = shift(rng);
    std::vector<double> y(x.values().begin(), x.values().end());
    for (auto& v : y) v += c;
    EXPECT_NEAR(tape.log_sum_exp(Tensor::vector(y)).item(), tape.log_sum_exp(x).item() + c, 1e-12);
  }
}
