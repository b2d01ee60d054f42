#include <gtest/gtest.h>

#include <cmath>

#include "helpers.hpp"
#include "mope/errors.hpp"
#include "mope/tensor.hpp"

using namespace mope;
using mope::test::random_tensor;

namespace {

std::vector<float> values(Var v) { return v.value().to_vector(); }

}  // namespace

TEST(Tensor, ShapeInvariant) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<float>(5)), ShapeError);
  Tensor t({2, 3}, std::vector<float>(6, 1.0f));
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2);
  EXPECT_EQ(t.cols(), 3);
}

TEST(Matmul, IdentityAndHandArithmetic) {
  Tape tape;
  Var id = tape.constant(Tensor({2, 2}, {1, 0, 0, 1}));
  Var m = tape.constant(Tensor({2, 2}, {1, 2, 3, 4}));
  EXPECT_EQ(values(matmul(id, m)), (std::vector<float>{1, 2, 3, 4}));
  Var a = tape.constant(Tensor({1, 2}, {1, 2}));
  Var b = tape.constant(Tensor({2, 1}, {3, 4}));
  EXPECT_EQ(values(matmul(a, b)), (std::vector<float>{11}));
}

TEST(Matmul, MatchesTripleLoopExactly) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Tape tape;
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({4, 5}, rng);
    Var c = matmul(tape.constant(a), tape.constant(b));
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 5; ++j) {
        float acc = 0.0f;
        for (int p = 0; p < 4; ++p) acc += a.at(i, p) * b.at(p, j);
        EXPECT_EQ(c.value().at(i, j), acc);
      }
    }
  }
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  Tape tape;
  Var a = tape.constant(Tensor::zeros({2, 3}));
  Var b = tape.constant(Tensor::zeros({4, 2}));
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x2]"), std::string::npos) << msg;
  }
}

TEST(Softmax, ClosedForms) {
  Tape tape;
  auto row = [&](std::vector<float> x) { return values(softmax_rows(tape.constant(Tensor({1, 2}, x)))); };
  auto half = row({0, 0});
  EXPECT_FLOAT_EQ(half[0], 0.5f);
  EXPECT_FLOAT_EQ(half[1], 0.5f);
  auto big = row({1000, 1000});
  EXPECT_FLOAT_EQ(big[0], 0.5f);
  EXPECT_FLOAT_EQ(big[1], 0.5f);
  auto q = row({0, std::log(3.0f)});
  EXPECT_NEAR(q[0], 0.25f, 1e-6);
  EXPECT_NEAR(q[1], 0.75f, 1e-6);
}

TEST(Softmax, RowsSumToOne) {
  std::mt19937_64 rng(3);
  Tape tape;
  Var s = softmax_rows(tape.constant(random_tensor({6, 9}, rng, 5.0f)));
  for (int r = 0; r < 6; ++r) {
    double sum = 0.0;
    for (int c = 0; c < 9; ++c) {
      EXPECT_GE(s.value().at(r, c), 0.0f);
      sum += s.value().at(r, c);
    }
    EXPECT_NEAR(sum, 1.0, 1e-6);
  }
}

TEST(LayerNorm, ZeroMeanUnitVariance) {
  std::mt19937_64 rng(5);
  Tape tape;
  Var y = layer_norm(tape.constant(random_tensor({4, 8}, rng, 3.0f)), tape.constant(Tensor::filled({8}, 1.0f)),
                     tape.constant(Tensor::zeros({8})), 1e-5f);
  for (int r = 0; r < 4; ++r) {
    double mean = 0.0, var = 0.0;
    for (int c = 0; c < 8; ++c) mean += y.value().at(r, c);
    mean /= 8;
    for (int c = 0; c < 8; ++c) var += (y.value().at(r, c) - mean) * (y.value().at(r, c) - mean);
    EXPECT_NEAR(mean, 0.0, 1e-5);
    EXPECT_NEAR(var / 8, 1.0, 1e-3);
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogV) {
  Tape tape;
  Var logits = tape.constant(Tensor::zeros({3, 5}));
  std::vector<int> targets{0, 1, 2}, mask{1, 1, 1};
  EXPECT_NEAR(cross_entropy(logits, targets, mask).value()[0], std::log(5.0), 1e-6);
}

TEST(CrossEntropy, MaskedRowsIgnored) {
  Tape tape;
  Var logits = tape.constant(Tensor({2, 2}, {10, 0, 0, 0}));
  std::vector<int> targets{0, 1}, mask{0, 1};
  EXPECT_NEAR(cross_entropy(logits, targets, mask).value()[0], std::log(2.0), 1e-6);
}

TEST(CrossEntropy, AllMaskedIsZero) {
  Tape tape;
  Var logits = tape.constant(Tensor::zeros({2, 2}));
  std::vector<int> targets{0, 1}, mask{0, 0};
  EXPECT_EQ(cross_entropy(logits, targets, mask).value()[0], 0.0f);
}

TEST(Backward, ConstantsReceiveNoGradient) {
  Tape tape;
  Var a = tape.parameter(Tensor({1, 2}, {1, 2}));
  Var b = tape.constant(Tensor({2, 1}, {3, 4}));
  Gradients g = tape.backward(sum(matmul(a, b)));
  EXPECT_TRUE(g.count(a.id));
  EXPECT_FALSE(g.count(b.id));
  EXPECT_EQ(g.at(a.id).to_vector(), (std::vector<float>{3, 4}));
}

TEST(Backward, NonScalarLossRejected) {
  Tape tape;
  Var a = tape.parameter(Tensor::zeros({2, 2}));
  EXPECT_THROW(tape.backward(a), ContractError);
}

// Finite-difference check of a composite expression touching every op.
TEST(Backward, CompositeMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  const Tensor x0 = random_tensor({3, 4}, rng), w0 = random_tensor({4, 4}, rng, 0.5f);
  const Tensor g0 = random_tensor({4}, rng), b0 = random_tensor({4}, rng);
  const std::vector<int> targets{1, 3, 0}, mask{1, 0, 1};
  auto loss_of = [&](const Tensor& x, const Tensor& w, Tape& tape, Var* xv, Var* wv) {
    Var X = tape.parameter(x), W = tape.parameter(w);
    if (xv) *xv = X;
    if (wv) *wv = W;
    Var h = gelu(matmul(X, W));
    h = layer_norm(h, tape.constant(g0), tape.constant(b0), 1e-5f);
    Var s = causal_softmax(matmul_nt(h, X), 0);
    Var o = add(matmul(s, h), scale(mul(h, h), 0.1f));
    o = add_bias(o, tape.constant(b0));
    return cross_entropy(o, targets, mask);
  };
  Tape tape;
  Var X, W;
  Var loss = loss_of(x0, w0, tape, &X, &W);
  Gradients g = tape.backward(loss);
  auto numeric = [&](bool wrt_x, std::size_t i) {
    auto f = [&](const std::vector<float>& d) {
      Tape t;
      return static_cast<double>(wrt_x ? loss_of(Tensor(x0.shape(), d), w0, t, nullptr, nullptr).value()[0]
                                       : loss_of(x0, Tensor(w0.shape(), d), t, nullptr, nullptr).value()[0]);
    };
    return mope::test::central_difference(f, wrt_x ? x0.to_vector() : w0.to_vector(), i, 1e-3);
  };
  for (std::size_t i = 0; i < x0.size(); ++i) {
    EXPECT_TRUE(mope::test::grad_close(g.at(X.id)[i], numeric(true, i), 1e-2, 2e-4)) << "x[" << i << "]";
  }
  for (std::size_t i = 0; i < w0.size(); ++i) {
    EXPECT_TRUE(mope::test::grad_close(g.at(W.id)[i], numeric(false, i), 1e-2, 2e-4)) << "w[" << i << "]";
  }
}

TEST(TreeSoftmax, MatchesCausalOnAChain) {
  std::mt19937_64 rng(13);
  const int p = 3, t = 5;
  Tensor scores = random_tensor({t, p + t}, rng);
  std::vector<int> parents{-1, 0, 1, 2, 3};
  Tape tape;
  Var a = causal_softmax(tape.constant(scores), p);
  Var b = tree_softmax(tape.constant(scores), tree_columns(parents, p));
  EXPECT_TRUE(a.value().bit_equal(b.value()));
}

TEST(TreeSoftmax, BranchesSeeOnlyAncestors) {
  // 0 -> 1, 0 -> 2: node 2 must not see node 1.
  std::vector<int> parents{-1, 0, 0};
  auto cols = tree_columns(parents, 2);
  EXPECT_EQ((*cols)[2], (std::vector<int>{0, 1, 2, 4}));
  Tape tape;
  Var s = tree_softmax(tape.constant(Tensor::zeros({3, 5})), cols);
  EXPECT_EQ(s.value().at(2, 3), 0.0f);
  EXPECT_FLOAT_EQ(s.value().at(2, 4), 0.25f);
}

TEST(TreeColumns, ParentMustPrecede) {
  std::vector<int> parents{-1, 2, 0};
  EXPECT_THROW(tree_columns(parents, 0), ContractError);
}
