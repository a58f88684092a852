#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "test_util.hpp"
#include "wavbert/ops.hpp"

using namespace wavbert;
using namespace wavbert::testing;

namespace {

constexpr double kOpTol = 1e-6;

TEST(Tensor, ShapeMustMatchValues) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  Tensor t({2, 3}, std::vector<double>(6, 1.0));
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_DOUBLE_EQ(t.at({1, 2}), 1.0);
  EXPECT_THROW(t.at({2, 0}), DimensionError);
  EXPECT_THROW(t.item(), ContractError);
}

TEST(Tensor, CloneIsIndependent) {
  Tensor a({2}, {1, 2});
  Tensor b = a.clone();
  b.mutable_data()[0] = 5;
  EXPECT_DOUBLE_EQ(a.data()[0], 1.0);
  Tensor c = a;
  c.mutable_data()[0] = 7;
  EXPECT_DOUBLE_EQ(a.data()[0], 7.0);
}

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {1, 2, 3, 4});
  expect_values(matmul(eye, m), {1, 2, 3, 4});
}

TEST(Matmul, HandComputedProduct) {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 1}, {5, 6});
  const Tensor c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  expect_values(c, {17, 39});
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tensor a({2, 3}, std::vector<double>(6));
  Tensor b({2, 2}, std::vector<double>(4));
  try {
    matmul(a, b);
    FAIL() << "expected a dimension error";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(2, 3)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(2, 2)"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientOfSumIsOnesTimesBTransposed) {
  Rng rng(1);
  Tensor a = random_tensor({3, 4}, rng, 1.0, true);
  Tensor b = random_tensor({4, 2}, rng);
  {
    TapeScope scope;
    backward(sum(matmul(a, b)));
  }
  // ones(3,2) . b^T : every row equals the row sums of b.
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t p = 0; p < 4; ++p) {
      const double expected = b.at({p, 0}) + b.at({p, 1});
      EXPECT_NEAR(a.grad()[i * 4 + p], expected, 1e-14);
    }
  }
  EXPECT_LT(max_grad_error({a, b}, [](const auto& in) { return sum(matmul(in[0], in[1])); }), kOpTol);
}

TEST(Matmul, BroadcastBatchGradients) {
  Rng rng(2);
  Tensor a = random_tensor({2, 3, 4}, rng);
  Tensor b = random_tensor({4, 5}, rng);
  const Tensor c = matmul(a, b);
  EXPECT_EQ(c.shape(), (Shape{2, 3, 5}));
  // batch item 1 equals the plain product of its slice
  Tensor a1({3, 4}, std::vector<double>(a.data().begin() + 12, a.data().end()));
  const Tensor c1 = matmul(a1, b);
  for (std::size_t i = 0; i < 15; ++i) EXPECT_DOUBLE_EQ(c.data()[15 + i], c1.data()[i]);
  EXPECT_LT(max_grad_error({a, b}, [](const auto& in) { return weighted_sum(matmul(in[0], in[1])); }), kOpTol);
}

TEST(Softmax, UniformOnEqualInputs) {
  const Tensor s = softmax(Tensor({3}, {0, 0, 0}), 0);
  expect_values(s, {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-15);
}

TEST(Softmax, NoOverflowOnLargeInputs) {
  const Tensor s = softmax(Tensor({2}, {1000, 0}), 0);
  EXPECT_NEAR(s.data()[0], 1.0, 1e-12);
  EXPECT_NEAR(s.data()[1], 0.0, 1e-12);
}

TEST(Softmax, SumsToOneAndIsSimplexPoint) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = random_tensor({5}, rng, 10.0);
    const Tensor s = softmax(x, 0);
    double total = 0.0;
    for (double v : s.data()) {
      EXPECT_GE(v, 0.0);
      total += v;
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
  const Tensor x = random_tensor({3, 4, 2}, rng, 3.0);
  const Tensor s = softmax(x, 1);
  for (std::size_t o = 0; o < 3; ++o) {
    for (std::size_t in = 0; in < 2; ++in) {
      double total = 0.0;
      for (std::size_t e = 0; e < 4; ++e) total += s.at({o, e, in});
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, NonFiniteInputIsRejected) {
  EXPECT_THROW(softmax(Tensor({2}, {1.0, std::numeric_limits<double>::quiet_NaN()}), 0), NumericError);
  EXPECT_THROW(log_softmax(Tensor({2}, {1.0, std::numeric_limits<double>::infinity()}), 0), NumericError);
  EXPECT_THROW(softmax(Tensor({2}, {1.0, 2.0}), 1), DimensionError);
}

TEST(Softmax, Gradients) {
  Rng rng(4);
  Tensor x = random_tensor({3, 4}, rng);
  EXPECT_LT(max_grad_error({x}, [](const auto& in) { return weighted_sum(softmax(in[0], 1)); }), kOpTol);
  EXPECT_LT(max_grad_error({x}, [](const auto& in) { return weighted_sum(softmax(in[0], 0)); }), kOpTol);
  EXPECT_LT(max_grad_error({x}, [](const auto& in) { return weighted_sum(log_softmax(in[0], 1)); }), kOpTol);
}

TEST(LogSoftmax, MatchesLogOfSoftmax) {
  Rng rng(5);
  const Tensor x = random_tensor({4, 6}, rng, 5.0);
  const Tensor a = log_softmax(x, 1);
  const Tensor b = softmax(x, 1);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], std::log(b.data()[i]), 1e-12);
}

TEST(MaskedSoftmax, MaskedKeysGetZeroAndRowsNormalize) {
  Rng rng(6);
  Tensor x = random_tensor({3, 4}, rng);
  const BoolSeq mask{true, false, true, false};
  const Tensor s = masked_softmax(x, mask);
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ(s.at({r, 1}), 0.0);
    EXPECT_EQ(s.at({r, 3}), 0.0);
    EXPECT_NEAR(s.at({r, 0}) + s.at({r, 2}), 1.0, 1e-12);
  }
  EXPECT_THROW(masked_softmax(x, BoolSeq(4, false)), DegenerateAttentionError);
  EXPECT_THROW(masked_softmax(x, BoolSeq(3, true)), DimensionError);
  EXPECT_LT(max_grad_error({x}, [&](const auto& in) { return weighted_sum(masked_softmax(in[0], mask)); }), kOpTol);
}

TEST(Sigmoid, ValuesAndSaturation) {
  expect_values(sigmoid(Tensor({1}, {0.0})), {0.5});
  const Tensor s = sigmoid(Tensor({2}, {-1e3, 1e3}));
  EXPECT_NEAR(s.data()[0], 0.0, 1e-12);
  EXPECT_NEAR(s.data()[1], 1.0, 1e-12);
  for (double v : s.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Sigmoid, DerivativeMatchesClosedFormAndFiniteDifferences) {
  Rng rng(7);
  Tensor x = random_tensor({6}, rng, 2.0, true);
  {
    TapeScope scope;
    backward(sum(sigmoid(x)));
  }
  for (std::size_t i = 0; i < 6; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-x.data()[i]));
    EXPECT_NEAR(x.grad()[i], s * (1.0 - s), 1e-15);
  }
  EXPECT_LT(max_grad_error({x}, [](const auto& in) { return weighted_sum(sigmoid(in[0])); }), kOpTol);
}

TEST(Backward, SumGivesOnes) {
  Tensor w = Tensor::parameter({3}, {0.3, -1.0, 2.0});
  TapeScope scope;
  backward(sum(w));
  expect_values(Tensor({3}, {w.grad()[0], w.grad()[1], w.grad()[2]}), {1, 1, 1});
}

TEST(Backward, SquareGivesTwiceW) {
  Tensor w = Tensor::parameter({3}, {1, 2, 3});
  TapeScope scope;
  backward(sum(mul(w, w)));
  EXPECT_DOUBLE_EQ(w.grad()[0], 2.0);
  EXPECT_DOUBLE_EQ(w.grad()[1], 4.0);
  EXPECT_DOUBLE_EQ(w.grad()[2], 6.0);
}

TEST(Backward, RepeatedCallsAccumulateUntilZeroed) {
  Tensor w = Tensor::parameter({2}, {1, -1});
  {
    TapeScope scope;
    const Tensor loss = sum(mul(w, w));
    backward(loss);
    backward(loss);
  }
  EXPECT_DOUBLE_EQ(w.grad()[0], 4.0);
  EXPECT_DOUBLE_EQ(w.grad()[1], -4.0);
  w.zero_grad();
  EXPECT_DOUBLE_EQ(w.grad()[0], 0.0);
}

TEST(Backward, NonScalarLossIsAContractError) {
  Tensor w = Tensor::parameter({2}, {1, 2});
  TapeScope scope;
  EXPECT_THROW(backward(mul(w, w)), ContractError);
  EXPECT_THROW(backward(Tensor::scalar(1.0)), ContractError);  // not on the tape
}

TEST(Backward, UnrelatedTapeEntriesDoNotChangeGradients) {
  Tensor w = Tensor::parameter({3}, {0.5, -0.2, 0.9});
  Tensor u = Tensor::parameter({3}, {1, 2, 3});
  std::vector<double> clean;
  {
    TapeScope scope;
    backward(sum(mul(w, exp(w))));
    clean.assign(w.grad().begin(), w.grad().end());
  }
  w.zero_grad();
  {
    TapeScope scope;
    const Tensor noise = sum(mul(u, u));  // recorded but not part of the loss
    const Tensor loss = sum(mul(w, exp(w)));
    const Tensor more = sum(exp(u));
    backward(loss);
    (void)noise;
    (void)more;
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(w.grad()[i], clean[i]);
  EXPECT_FALSE(u.has_grad() && (u.grad()[0] != 0.0));
}

TEST(Backward, ReplayIsBitwiseDeterministic) {
  Rng rng(8);
  Tensor a = random_tensor({4, 5}, rng, 1.0, true);
  Tensor b = random_tensor({5, 3}, rng, 1.0, true);
  auto run = [&] {
    a.zero_grad();
    b.zero_grad();
    TapeScope scope;
    backward(weighted_sum(gelu(matmul(a, b))));
    return std::pair{std::vector<double>(a.grad().begin(), a.grad().end()),
                     std::vector<double>(b.grad().begin(), b.grad().end())};
  };
  const auto first = run();
  const auto second = run();
  EXPECT_EQ(first.first, second.first);
  EXPECT_EQ(first.second, second.second);
}

TEST(Tape, ClearReleasesIntermediates) {
  Tensor w = Tensor::parameter({2}, {1, 2});
  std::weak_ptr<detail::Node> weak;
  {
    TapeScope scope;
    {
      const Tensor mid = mul(w, w);
      weak = mid.node();
      sum(mid);
    }
    EXPECT_FALSE(weak.expired());  // held by the tape
    EXPECT_TRUE(scope.tape().size() >= 2u);
    scope.tape().clear();
    EXPECT_TRUE(weak.expired());
  }
}

TEST(Tape, NoGradGuardRecordsNothing) {
  Tensor w = Tensor::parameter({2}, {1, 2});
  TapeScope scope;
  {
    NoGradGuard guard;
    const Tensor y = mul(w, w);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_TRUE(scope.tape().empty());
}

TEST(Elementwise, BroadcastingAndGradients) {
  Rng rng(9);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor row = random_tensor({4}, rng);
  Tensor col = random_tensor({3, 1}, rng);
  const Tensor s = add(a, row);
  EXPECT_DOUBLE_EQ(s.at({2, 3}), a.at({2, 3}) + row.at({3}));
  const Tensor d = sub(a, col);
  EXPECT_DOUBLE_EQ(d.at({1, 2}), a.at({1, 2}) - col.at({1, 0}));
  EXPECT_THROW(add(a, random_tensor({3}, rng)), DimensionError);
  EXPECT_LT(max_grad_error({a, row}, [](const auto& in) { return weighted_sum(add(in[0], in[1])); }), kOpTol);
  EXPECT_LT(max_grad_error({a, col}, [](const auto& in) { return weighted_sum(sub(in[0], in[1])); }), kOpTol);
  EXPECT_LT(max_grad_error({a, row}, [](const auto& in) { return weighted_sum(mul(in[0], in[1])); }), kOpTol);
  EXPECT_LT(max_grad_error({a}, [](const auto& in) { return weighted_sum(scale(in[0], -2.5)); }), kOpTol);
  EXPECT_LT(max_grad_error({a}, [](const auto& in) { return weighted_sum(exp(in[0])); }), kOpTol);
}

TEST(Gelu, ExactErfFormAndGradient) {
  Rng rng(10);
  Tensor x = random_tensor({2, 5}, rng, 2.0);
  const Tensor y = gelu(x);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double v = x.data()[i];
    EXPECT_NEAR(y.data()[i], 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0))), 1e-15);
  }
  EXPECT_LT(max_grad_error({x}, [](const auto& in) { return weighted_sum(gelu(in[0])); }), kOpTol);
}

TEST(Reductions, MeanAndSum) {
  Tensor x({2, 2}, {1, 2, 3, 6});
  EXPECT_DOUBLE_EQ(sum(x).item(), 12.0);
  EXPECT_DOUBLE_EQ(mean(x).item(), 3.0);
  Rng rng(11);
  Tensor r = random_tensor({3, 3}, rng);
  EXPECT_LT(max_grad_error({r}, [](const auto& in) { return mean(mul(in[0], in[0])); }), kOpTol);
}

TEST(Shapes, TransposeAndReshape) {
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  const Tensor t = transpose(x);
  EXPECT_EQ(t.shape(), (Shape{3, 2}));
  expect_values(t, {1, 4, 2, 5, 3, 6});
  const Tensor r = reshape(x, {3, 2});
  expect_values(r, {1, 2, 3, 4, 5, 6});
  EXPECT_THROW(reshape(x, {4, 2}), DimensionError);
  Rng rng(12);
  Tensor b = random_tensor({2, 3, 4}, rng);
  EXPECT_EQ(transpose(b).shape(), (Shape{2, 4, 3}));
  EXPECT_LT(max_grad_error({b}, [](const auto& in) { return weighted_sum(transpose(in[0])); }), kOpTol);
  EXPECT_LT(max_grad_error({b}, [](const auto& in) { return weighted_sum(reshape(in[0], {6, 4})); }), kOpTol);
}

TEST(Concat, ThenSliceRecoversOperandsExactly) {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t rows = 1 + rng.below(6);
    const std::size_t wa = 1 + rng.below(6);
    const std::size_t wb = 1 + rng.below(6);
    const Tensor a = random_tensor({rows, wa}, rng);
    const Tensor b = random_tensor({rows, wb}, rng);
    const Tensor c = concat_last({a, b});
    EXPECT_EQ(c.shape(), (Shape{rows, wa + wb}));
    const Tensor a2 = slice_last(c, 0, wa);
    const Tensor b2 = slice_last(c, wa, wb);
    EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), a2.data().begin()));
    EXPECT_TRUE(std::equal(b.data().begin(), b.data().end(), b2.data().begin()));
  }
  Tensor a = random_tensor({3, 2}, rng);
  Tensor b = random_tensor({3, 4}, rng);
  EXPECT_LT(max_grad_error({a, b}, [](const auto& in) { return weighted_sum(concat_last({in[0], in[1]})); }), kOpTol);
  EXPECT_LT(max_grad_error({b}, [](const auto& in) { return weighted_sum(slice_last(in[0], 1, 2)); }), kOpTol);
  EXPECT_THROW(concat_last({a, random_tensor({2, 2}, rng)}), DimensionError);
  EXPECT_THROW(slice_last(a, 1, 2), DimensionError);
}

TEST(LayerNormOp, NormalizesAndMatchesFiniteDifferences) {
  Rng rng(14);
  Tensor x = random_tensor({4, 6}, rng, 3.0);
  Tensor gamma = Tensor::ones({6});
  Tensor beta = Tensor::zeros({6});
  const Tensor y = layer_norm(x, gamma, beta);
  for (std::size_t r = 0; r < 4; ++r) {
    double m = 0.0, v = 0.0;
    for (std::size_t j = 0; j < 6; ++j) m += y.at({r, j});
    m /= 6;
    for (std::size_t j = 0; j < 6; ++j) v += (y.at({r, j}) - m) * (y.at({r, j}) - m);
    v /= 6;
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v, 1.0, 1e-5);
  }
  Tensor g = random_tensor({6}, rng);
  Tensor b = random_tensor({6}, rng);
  EXPECT_LT(max_grad_error({x, g, b}, [](const auto& in) { return weighted_sum(layer_norm(in[0], in[1], in[2])); }),
            kOpTol);
}

TEST(Embedding, GatherAndFrozenRow) {
  Tensor table({4, 2}, {0, 1, 10, 11, 20, 21, 30, 31}, true);
  const std::vector<int> ids{2, 1, 2, 0};
  {
    TapeScope scope;
    const Tensor e = embedding(table, ids, 1);
    expect_values(e, {20, 21, 10, 11, 20, 21, 0, 1});
    backward(sum(e));
  }
  expect_values(Tensor({8}, {table.grad().begin(), table.grad().end()}), {1, 1, 0, 0, 2, 2, 0, 0});
  EXPECT_THROW(embedding(table, {4}), VocabularyError);
  EXPECT_THROW(embedding(table, {-1}), VocabularyError);
  Rng rng(15);
  Tensor t = random_tensor({5, 3}, rng);
  EXPECT_LT(max_grad_error({t}, [](const auto& in) { return weighted_sum(embedding(in[0], {4, 0, 4, 2})); }), kOpTol);
}

// Random shapes up to 8 per axis for every differentiable op.
TEST(Property, AllOpsMatchFiniteDifferencesOnRandomShapes) {
  Rng rng(16);
  double worst = 0.0;
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t m = 1 + rng.below(8), k = 1 + rng.below(8), n = 1 + rng.below(8);
    Tensor a = random_tensor({m, k}, rng);
    Tensor b = random_tensor({k, n}, rng);
    Tensor c = random_tensor({m, k}, rng);
    Tensor g = random_tensor({k}, rng);
    Tensor bt = random_tensor({k}, rng);
    worst = std::max(worst, max_grad_error({a, b}, [](const auto& in) { return weighted_sum(matmul(in[0], in[1])); }));
    worst = std::max(worst, max_grad_error({a, c}, [](const auto& in) { return weighted_sum(mul(add(in[0], in[1]), in[1])); }));
    worst = std::max(worst, max_grad_error({a}, [](const auto& in) { return weighted_sum(softmax(in[0], 1)); }));
    worst = std::max(worst, max_grad_error({a}, [](const auto& in) { return weighted_sum(log_softmax(in[0], 0)); }));
    worst = std::max(worst, max_grad_error({a}, [](const auto& in) { return weighted_sum(sigmoid(in[0])); }));
    worst = std::max(worst, max_grad_error({a}, [](const auto& in) { return weighted_sum(gelu(in[0])); }));
    worst = std::max(worst, max_grad_error({a, g, bt}, [](const auto& in) {
      return weighted_sum(layer_norm(in[0], in[1], in[2]));
    }));
    worst = std::max(worst, max_grad_error({a, c}, [](const auto& in) { return weighted_sum(concat_last({in[0], in[1]})); }));
    worst = std::max(worst, max_grad_error({a}, [](const auto& in) { return weighted_sum(transpose(in[0])); }));
    worst = std::max(worst, max_grad_error({a}, [](const auto& in) { return mean(exp(in[0])); }));
  }
  EXPECT_LT(worst, kOpTol);
}

}  // namespace
