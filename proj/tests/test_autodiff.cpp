#include <gtest/gtest.h>

#include <random>

#include "jamje/autodiff.hpp"
#include "jamje/gradcheck.hpp"

using namespace jamje;
using namespace jamje::ad;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = u(rng);
  return t;
}

// Reduces an arbitrary op output to a scalar with fixed random weights so that
// every output coordinate contributes a distinct adjoint.
Var weighted_sum(Var y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Var w = y.tape->constant(random_tensor(y.shape(), rng));
  return sum(mul(y, w));
}

}  // namespace

TEST(Primitive, SoftmaxOfEqualLogitsIsUniform) {
  Tape tape;
  Var y = softmax_rows(tape.constant(Tensor(Shape{1, 2}, {0.0, 0.0})));
  EXPECT_DOUBLE_EQ(y.value()[0], 0.5);
  EXPECT_DOUBLE_EQ(y.value()[1], 0.5);
}

TEST(Primitive, ReluClampsNegatives) {
  Tape tape;
  Var y = relu(tape.constant(Tensor(Shape{2}, {-1.0, 2.0})));
  EXPECT_EQ(y.value()[0], 0.0);
  EXPECT_EQ(y.value()[1], 2.0);
}

TEST(Primitive, MatmulOfOnes) {
  Tape tape;
  Var y = matmul(tape.constant(Tensor(Shape{2, 3}, 1.0)), tape.constant(Tensor(Shape{3, 2}, 1.0)));
  ASSERT_EQ(y.shape(), (Shape{2, 2}));
  for (double v : y.value().values()) EXPECT_EQ(v, 3.0);
}

TEST(Primitive, ShapeMismatchNamesBothShapes) {
  Tape tape;
  Var a = tape.constant(Tensor(Shape{2, 3}));
  Var b = tape.constant(Tensor(Shape{2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(2x3) vs (2x3)"), std::string::npos) << msg;
  }
}

TEST(Primitive, NonFiniteInputRejected) {
  Tape tape;
  EXPECT_THROW(tape.leaf(Tensor(Shape{1}, {std::nan("")})), NumericError);
  EXPECT_THROW(log(tape.constant(Tensor(Shape{1}, {0.0}))), NumericError);
}

TEST(Primitive, SoftmaxRowsAreStochastic) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    Tape tape;
    Var y = softmax_rows(tape.constant(random_tensor(Shape{5, 9}, rng, -20.0, 20.0)));
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < 9; ++j) {
        const double v = y.value()[r * 9 + j];
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Backward, SquareOfThree) {
  Tape tape;
  Var x = tape.leaf(Tensor(Shape{1}, {3.0}));
  Gradients g = tape.backward(sum(mul(x, x)));
  EXPECT_DOUBLE_EQ(g[x][0], 6.0);
}

TEST(Backward, MeanOfSoftmaxHasZeroGradient) {
  std::mt19937_64 rng(11);
  const Tensor point = random_tensor(Shape{4, 6}, rng, -3.0, 3.0);
  Tape tape;
  Var x = tape.leaf(point);
  Gradients g = tape.backward(mean(softmax_rows(x)));
  for (double v : g[x].values()) EXPECT_NEAR(v, 0.0, 1e-16);
  // Finite-difference oracle agrees.
  const double err = grad_check([](Tape&, Var v) { return mean(softmax_rows(v)); }, point, 1e-5);
  EXPECT_LT(err, 1e-9);
}

TEST(Backward, ReluOfConvMatchesCentralDifferences) {
  std::mt19937_64 rng(3);
  const Tensor w = random_tensor(Shape{3, 4}, rng);
  const Tensor point = random_tensor(Shape{2, 5, 3}, rng);
  auto f = [&](Tape& tape, Var x) { return weighted_sum(relu(conv1x1(x, tape.constant(w))), 5); };
  EXPECT_LT(grad_check(f, point, 1e-5), 1e-7);
}

TEST(Backward, ReusedTensorAccumulatesBothPaths) {
  // f(x) = sum(x*x) + 3 sum(x)  =>  df/dx = 2x + 3
  Tape tape;
  Tensor xv(Shape{3}, {1.0, -2.0, 0.5});
  Var x = tape.leaf(xv);
  Var f = add(sum(mul(x, x)), scale(sum(x), 3.0));
  Gradients g = tape.backward(f);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(g[x][i], 2.0 * xv[i] + 3.0);
}

TEST(Backward, UnusedLeafAndConstantsGetZero) {
  Tape tape;
  Var x = tape.leaf(Tensor(Shape{2}, {1.0, 2.0}));
  Var unused = tape.leaf(Tensor(Shape{2}, {5.0, 6.0}));
  Var c = tape.constant(Tensor(Shape{2}, {1.0, 1.0}));
  Gradients g = tape.backward(sum(mul(x, c)));
  EXPECT_FALSE(g.has(unused));
  EXPECT_FALSE(g.has(c));
  EXPECT_EQ(g[unused], Tensor(Shape{2}));
  EXPECT_FALSE(tape.requires_grad(c));
}

TEST(Backward, Errors) {
  Tape tape, other;
  Var x = tape.leaf(Tensor(Shape{2}, {1.0, 2.0}));
  EXPECT_THROW(tape.backward(x), ShapeError);
  Var y = other.leaf(Tensor(Shape{1}, {1.0}));
  EXPECT_THROW(tape.backward(y), std::invalid_argument);
}

TEST(Tape, TopologicalOrderAndReset) {
  Tape tape;
  Var x = tape.leaf(Tensor(Shape{2}, {1.0, 2.0}));
  Var y = relu(x);
  EXPECT_LT(x.id, y.id);
  EXPECT_EQ(tape.size(), 2u);
  tape.reset();
  EXPECT_EQ(tape.size(), 0u);
}

TEST(GradCheck, SumOfSquares) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 10; ++i) {
    const double err = grad_check([](Tape&, Var x) { return sum(mul(x, x)); }, random_tensor(Shape{7}, rng, -5, 5));
    EXPECT_LT(err, 1e-7);
  }
}

TEST(GradCheck, NonFinitePerturbationThrows) {
  // log of a value that the perturbation pushes through zero.
  auto f = [](Tape&, Var x) { return sum(log(x)); };
  EXPECT_THROW(grad_check(f, Tensor(Shape{1}, {5e-6}), 1e-5), NumericError);
}

// Every primitive agrees with central differences at 100 random points.
class PrimitiveGradient : public ::testing::TestWithParam<std::string> {};

TEST_P(PrimitiveGradient, MatchesFiniteDifferences) {
  const std::string op = GetParam();
  std::mt19937_64 rng(std::hash<std::string>{}(op));
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor other = random_tensor(Shape{3, 4}, rng);
    Tensor vec = random_tensor(Shape{4}, rng);
    Tensor batched = random_tensor(Shape{2, 4, 3}, rng);
    Tensor s = random_tensor(Shape{1}, rng);
    ScalarFn f;
    Tensor point;
    const auto seed = static_cast<std::uint64_t>(trial);
    if (op == "matmul_lhs") {
      point = random_tensor(Shape{2, 3}, rng);
      f = [&](Tape& t, Var x) { return weighted_sum(matmul(x, t.constant(other)), seed); };
    } else if (op == "matmul_rhs") {
      point = random_tensor(Shape{4, 2}, rng);
      f = [&](Tape& t, Var x) { return weighted_sum(matmul(t.constant(other), x), seed); };
    } else if (op == "bmm") {
      point = random_tensor(Shape{2, 3, 4}, rng);
      f = [&](Tape& t, Var x) { return weighted_sum(matmul(x, t.constant(batched)), seed); };
    } else if (op == "add") {
      point = random_tensor(Shape{3, 4}, rng);
      f = [&](Tape& t, Var x) { return weighted_sum(add(x, t.constant(other)), seed); };
    } else if (op == "add_bias") {
      point = random_tensor(Shape{4}, rng);
      f = [&](Tape& t, Var x) { return weighted_sum(add_bias(t.constant(other), x), seed); };
    } else if (op == "scale") {
      point = random_tensor(Shape{3, 4}, rng);
      f = [&](Tape&, Var x) { return weighted_sum(scale(x, -1.7), seed); };
    } else if (op == "mul_scalar") {
      point = random_tensor(Shape{1}, rng);
      f = [&](Tape& t, Var x) { return weighted_sum(mul_scalar(t.constant(other), x), seed); };
    } else if (op == "mul_scalar_lhs") {
      point = random_tensor(Shape{3, 4}, rng);
      f = [&](Tape& t, Var x) { return weighted_sum(mul_scalar(x, t.constant(s)), seed); };
    } else if (op == "relu") {
      point = random_tensor(Shape{3, 4}, rng);
      f = [&](Tape&, Var x) { return weighted_sum(relu(x), seed); };
    } else if (op == "softmax_rows") {
      point = random_tensor(Shape{3, 4}, rng, -3, 3);
      f = [&](Tape&, Var x) { return weighted_sum(softmax_rows(x), seed); };
    } else if (op == "mean") {
      point = random_tensor(Shape{3, 4}, rng);
      f = [&](Tape&, Var x) { return mean(mul(x, x)); };
    } else if (op == "log") {
      point = random_tensor(Shape{3, 4}, rng, 0.5, 2.0);
      f = [&](Tape&, Var x) { return weighted_sum(log(x), seed); };
    } else if (op == "l2_normalize_rows") {
      point = random_tensor(Shape{3, 4}, rng);
      f = [&](Tape&, Var x) { return weighted_sum(l2_normalize_rows(x), seed); };
    } else if (op == "conv1x1") {
      point = random_tensor(Shape{2, 2, 2, 3}, rng);
      f = [&](Tape& t, Var x) { return weighted_sum(conv1x1(x, t.constant(other)), seed); };
    } else if (op == "conv1x1_weight") {
      point = random_tensor(Shape{3, 4}, rng);
      f = [&](Tape& t, Var x) { return weighted_sum(conv1x1(t.constant(batched), x), seed); };
    } else if (op == "reshape") {
      point = random_tensor(Shape{3, 4}, rng);
      f = [&](Tape&, Var x) { return weighted_sum(reshape(x, Shape{2, 6}), seed); };
    } else if (op == "transpose") {
      point = random_tensor(Shape{2, 3, 4}, rng);
      f = [&](Tape&, Var x) { return weighted_sum(transpose(x), seed); };
    } else if (op == "space_to_depth") {
      point = random_tensor(Shape{1, 4, 4, 2}, rng);
      f = [&](Tape&, Var x) { return weighted_sum(space_to_depth(x, 2), seed); };
    } else if (op == "max_over_points") {
      point = random_tensor(Shape{2, 5, 3}, rng);
      f = [&](Tape&, Var x) { return weighted_sum(max_over_points(x), seed); };
    } else if (op == "pick") {
      point = random_tensor(Shape{3, 4}, rng);
      f = [&](Tape&, Var x) { return weighted_sum(pick(x, {0, 3, 1}), seed); };
    } else if (op == "slice") {
      point = random_tensor(Shape{12}, rng);
      f = [&](Tape&, Var x) { return weighted_sum(slice(x, 3, Shape{2, 3}), seed); };
    }
    ASSERT_TRUE(f) << op;
    worst = std::max(worst, grad_check(f, point, 1e-5));
  }
  EXPECT_LT(worst, 1e-5) << op;
}

INSTANTIATE_TEST_SUITE_P(AllOps, PrimitiveGradient,
                         ::testing::Values("matmul_lhs", "matmul_rhs", "bmm", "add", "add_bias", "scale",
                                           "mul_scalar", "mul_scalar_lhs", "relu", "softmax_rows", "mean", "log",
                                           "l2_normalize_rows", "conv1x1", "conv1x1_weight", "reshape",
                                           "transpose", "space_to_depth", "max_over_points", "pick", "slice"));
