#include "olab/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "gradcheck.hpp"
#include "olab/errors.hpp"

using namespace olab;
using olab::testing::gradient_error;
using olab::testing::probe;
using olab::testing::random_tensor;

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor y = matmul(eye, x);
  EXPECT_EQ(y.shape(), x.shape());
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Matmul, HandArithmetic) {
  Tensor y = matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4}));
  EXPECT_EQ(y.shape(), (Shape{1, 1}));
  EXPECT_EQ(y[0], 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(1);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  EXPECT_LT(gradient_error([&] { return probe(matmul(a, b)); }, {a, b}), 1e-6);
}

TEST(Matmul, BatchedWithBroadcastRhs) {
  std::mt19937_64 rng(2);
  Tensor a = random_tensor({2, 3, 4}, rng);
  Tensor b = random_tensor({4, 5}, rng);
  Tensor c = matmul(a, b);
  ASSERT_EQ(c.shape(), (Shape{2, 3, 5}));
  // batch 1, row 2, col 4 by hand
  double expect = 0;
  for (std::size_t k = 0; k < 4; ++k) expect += a[12 + 2 * 4 + k] * b[k * 5 + 4];
  EXPECT_NEAR(c[15 + 2 * 5 + 4], expect, 1e-14);
  EXPECT_LT(gradient_error([&] { return probe(matmul(a, b)); }, {a, b}), 1e-6);
}

TEST(Softmax, UniformLogits) {
  Tensor y = softmax(Tensor::zeros({4}));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(y[i], 0.25);
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  Tensor y = softmax(Tensor::from({2}, {1000, 0}));
  EXPECT_NEAR(y[0], 1.0, 1e-12);
  EXPECT_NEAR(y[1], 0.0, 1e-12);
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({8}, rng, -2, 2);
  EXPECT_LT(gradient_error([&] { return probe(softmax(x)); }, {x}), 1e-6);
}

TEST(Softmax, NonLastAxis) {
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({3, 4}, rng);
  Tensor y = softmax(x, 0);
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_NEAR(y[j] + y[4 + j] + y[8 + j], 1.0, 1e-15);
  }
  EXPECT_LT(gradient_error([&] { return probe(softmax(x, 0)); }, {x}), 1e-6);
}

TEST(Softmax, MaskedEntriesGetZeroAndNanIsRejected) {
  const double ninf = -std::numeric_limits<double>::infinity();
  Tensor y = softmax(Tensor::from({3}, {0.0, ninf, 0.0}));
  EXPECT_EQ(y[1], 0.0);
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_THROW(softmax(Tensor::from({2}, {std::nan(""), 0.0})), NumericError);
  EXPECT_THROW(softmax(Tensor::from({2}, {ninf, ninf})), NumericError);
}

TEST(LayerNorm, ConstantRowMapsToZero) {
  Tensor y = layer_norm(Tensor::full({1, 4}, 3.0), Tensor::full({4}, 1.0),
                        Tensor::zeros({4}), 1e-5);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, TwoElementRowStandardizes) {
  Tensor y = layer_norm(Tensor::from({1, 2}, {1, 3}), Tensor::full({2}, 1.0),
                        Tensor::zeros({2}), 0.0);
  EXPECT_DOUBLE_EQ(y[0], -1.0);
  EXPECT_DOUBLE_EQ(y[1], 1.0);
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({3, 5}, rng, -2, 2);
  Tensor g = random_tensor({5}, rng, 0.5, 1.5);
  Tensor b = random_tensor({5}, rng);
  EXPECT_LT(gradient_error([&] { return probe(layer_norm(x, g, b, 1e-5)); }, {x, g, b}),
            1e-6);
}

TEST(LayerNorm, RejectsMismatchedAffine) {
  EXPECT_THROW(layer_norm(Tensor::zeros({2, 3}), Tensor::zeros({2}), Tensor::zeros({3})),
               DimensionError);
}

TEST(Elementwise, AnalyticValues) {
  EXPECT_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  Tensor r = relu(Tensor::from({2}, {-2, 3}));
  EXPECT_EQ(r[0], 0.0);
  EXPECT_EQ(r[1], 3.0);
  EXPECT_NEAR(sigmoid(Tensor::scalar(std::log(3.0))).item(), 0.75, 1e-15);
  EXPECT_EQ(sigmoid(Tensor::scalar(-1000.0)).item(), 0.0);
  EXPECT_EQ(sigmoid(Tensor::scalar(1000.0)).item(), 1.0);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(6);
  Tensor x = random_tensor({10}, rng, -3, 3);
  Tensor y = random_tensor({10}, rng, -3, 3);
  EXPECT_LT(gradient_error([&] { return probe(gelu(x)); }, {x}), 1e-5);
  EXPECT_LT(gradient_error([&] { return probe(sigmoid(x)); }, {x}), 1e-6);
  EXPECT_LT(gradient_error([&] { return probe(relu(x)); }, {x}), 1e-6);
  EXPECT_LT(gradient_error([&] { return probe(mul(x, y)); }, {x, y}), 1e-6);
  EXPECT_LT(gradient_error([&] { return probe(sub(x, y)); }, {x, y}), 1e-6);
  EXPECT_LT(gradient_error([&] { return probe(add_scalar(scale(x, 2.5), 1.0)); }, {x}),
            1e-6);
  EXPECT_LT(gradient_error([&] { return mean(mul(x, x)); }, {x}), 1e-6);
}

TEST(Elementwise, BroadcastAddAndMul) {
  std::mt19937_64 rng(7);
  Tensor x = random_tensor({2, 3, 4}, rng);
  Tensor bias = random_tensor({4}, rng);
  Tensor rows = random_tensor({2, 3, 1}, rng);
  Tensor y = add(x, bias);
  EXPECT_DOUBLE_EQ(y[13], x[13] + bias[1]);
  Tensor z = mul(x, rows);
  EXPECT_DOUBLE_EQ(z[13], x[13] * rows[3]);
  EXPECT_LT(gradient_error([&] { return probe(add(x, bias)); }, {x, bias}), 1e-6);
  EXPECT_LT(gradient_error([&] { return probe(mul(rows, x)); }, {x, rows}), 1e-6);
  EXPECT_THROW(add(x, Tensor::zeros({3})), DimensionError);
}

TEST(Clip, GradientOnlyInsideOpenInterval) {
  Tensor x = Tensor::parameter({4}, {-0.5, 0.0, 0.5, 2.0});
  Tape tape;
  Tensor y = clip(x, 0.0, 1.0);
  tape.backward(sum(y));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[3], 1.0);
  EXPECT_EQ(x.grad(), (std::vector<double>{0.0, 0.0, 1.0, 0.0}));
}

TEST(Structural, PermuteTransposeReshape) {
  std::mt19937_64 rng(8);
  Tensor x = random_tensor({2, 3, 4}, rng);
  Tensor p = permute(x, {1, 0, 2});
  ASSERT_EQ(p.shape(), (Shape{3, 2, 4}));
  EXPECT_EQ(p[(2 * 2 + 1) * 4 + 3], x[(1 * 3 + 2) * 4 + 3]);
  Tensor t = transpose(x);
  ASSERT_EQ(t.shape(), (Shape{2, 4, 3}));
  EXPECT_EQ(t[(1 * 4 + 3) * 3 + 2], x[(1 * 3 + 2) * 4 + 3]);
  EXPECT_THROW(reshape(x, {5, 5}), DimensionError);
  EXPECT_LT(gradient_error([&] { return probe(permute(x, {2, 0, 1})); }, {x}), 1e-6);
  EXPECT_LT(gradient_error([&] { return probe(reshape(transpose(x), {6, 4})); }, {x}),
            1e-6);
}

TEST(Embedding, LookupAndScatterGradient) {
  std::mt19937_64 rng(9);
  Tensor table = random_tensor({5, 3}, rng);
  std::vector<std::int32_t> ids{4, 0, 4};
  Tensor e = embedding_lookup(table, ids);
  EXPECT_EQ(e[0], table[12]);
  EXPECT_LT(gradient_error([&] { return probe(embedding_lookup(table, ids)); }, {table}),
            1e-6);
  std::vector<std::int32_t> bad{5};
  EXPECT_THROW(embedding_lookup(table, bad), ContractError);
}

TEST(CrossEntropy, UniformLogitsGiveLogVocab) {
  std::vector<std::int32_t> t{1, kIgnoreIndex, 3};
  Tensor loss = cross_entropy(Tensor::zeros({3, 4}), t);
  EXPECT_NEAR(loss.item(), std::log(4.0), 1e-15);
  EXPECT_NEAR(std::exp(loss.item()), 4.0, 1e-12);
}

TEST(CrossEntropy, ConfidentCorrectLogitsGiveNearZero) {
  std::vector<std::int32_t> t{2};
  Tensor loss = cross_entropy(Tensor::from({1, 3}, {0, 0, 50}), t);
  EXPECT_LT(loss.item(), 1e-20);
}

TEST(CrossEntropy, AllIgnoredIsAContractError) {
  std::vector<std::int32_t> t{kIgnoreIndex, kIgnoreIndex};
  EXPECT_THROW(cross_entropy(Tensor::zeros({2, 3}), t), ContractError);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(10);
  Tensor x = random_tensor({4, 6}, rng, -2, 2);
  std::vector<std::int32_t> t{1, kIgnoreIndex, 5, 0};
  EXPECT_LT(gradient_error([&] { return cross_entropy(x, t); }, {x}), 1e-6);
}

TEST(Backward, LinearFunctionalGivesOnes) {
  Tensor w = Tensor::parameter({3}, {1, 2, 3});
  Tape tape;
  tape.backward(sum(w));
  EXPECT_EQ(w.grad(), (std::vector<double>{1, 1, 1}));
}

TEST(Backward, SquareGivesTwiceValue) {
  Tensor w = Tensor::parameter({2}, {1, 2});
  Tape tape;
  backward(sum(mul(w, w)));
  EXPECT_EQ(w.grad(), (std::vector<double>{2, 4}));
}

TEST(Backward, NonScalarLossIsRejected) {
  Tensor w = Tensor::parameter({2}, {1, 2});
  Tape tape;
  Tensor y = scale(w, 2.0);
  EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Backward, LossMustBeOnTheTape) {
  Tensor w = Tensor::parameter({2}, {1, 2});
  Tensor off_tape = sum(w);  // no active tape: not recorded
  Tape tape;
  EXPECT_THROW(tape.backward(off_tape), ContractError);
}

TEST(Backward, TwoLayerMlpMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  Tensor x = random_tensor({5, 4}, rng, -1, 1, false);
  Tensor w1 = random_tensor({4, 6}, rng);
  Tensor b1 = random_tensor({6}, rng);
  Tensor w2 = random_tensor({6, 3}, rng);
  Tensor b2 = random_tensor({3}, rng);
  std::vector<std::int32_t> t{0, 2, 1, 1, 0};
  auto loss = [&] {
    Tensor h = gelu(add(matmul(x, w1), b1));
    return cross_entropy(add(matmul(h, w2), b2), t);
  };
  EXPECT_LT(gradient_error(loss, {w1, b1, w2, b2}), 1e-5);
}

TEST(Backward, SharedSubexpressionEqualsExpandedTree) {
  std::mt19937_64 rng(12);
  Tensor w = random_tensor({4}, rng);
  std::vector<double> shared_grad;
  {
    Tape tape;
    Tensor s = sigmoid(w);
    tape.backward(sum(mul(s, s)));
    shared_grad = w.grad();
  }
  w.zero_grad();
  {
    Tape tape;
    tape.backward(sum(mul(sigmoid(w), sigmoid(w))));
  }
  const auto expanded = w.grad();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(shared_grad[i], expanded[i]);
}

TEST(Tape, ParentsPrecedeChildrenAndEachNodeRunsOnce) {
  std::mt19937_64 rng(13);
  Tensor a = random_tensor({3, 3}, rng);
  Tape tape;
  Tensor h = relu(matmul(a, a));
  Tensor loss = sum(add(h, softmax(h)));
  for (std::size_t i = 0; i < tape.size(); ++i) {
    for (auto pid : tape.entry(i).parent_ids) {
      EXPECT_LT(pid, static_cast<std::int64_t>(i));
    }
  }
  EXPECT_EQ(tape.backward(loss), tape.size());
}

TEST(Tape, NoGradGuardSuppressesRecording) {
  Tensor w = Tensor::parameter({2}, {1, 2});
  Tape tape;
  {
    NoGradGuard guard;
    Tensor y = sum(w);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Determinism, RepeatedForwardIsBitIdentical) {
  std::mt19937_64 rng(14);
  Tensor a = random_tensor({6, 6}, rng);
  auto f = [&] { return layer_norm(gelu(matmul(a, a)), Tensor::full({6}, 1.0),
                                   Tensor::zeros({6}), 1e-5); };
  Tensor y1 = f();
  Tensor y2 = f();
  for (std::size_t i = 0; i < y1.numel(); ++i) EXPECT_EQ(y1[i], y2[i]);
}
