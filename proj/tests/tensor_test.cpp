#include <gtest/gtest.h>

#include <cmath>

#include "pinmt/grad_check.hpp"
#include "pinmt/ops.hpp"
#include "test_util.hpp"

namespace pinmt {
namespace {

using T = Tensor<double>;
using testing::random_tensor;
using testing::to_vec;

TEST(Primitives, MatmulHandContraction) {
  auto a = T::from({2, 2}, {1, 2, 3, 4});
  auto b = T::from({2, 1}, {1, 1});
  auto c = apply_primitive<double>("matmul", {a, b});
  EXPECT_EQ(c.shape(), (Shape{2, 1}));
  EXPECT_EQ(to_vec(c), (std::vector<double>{3, 7}));
}

TEST(Primitives, SoftmaxOfEqualLogitsIsUniform) {
  auto y = softmax_last_axis(T::from({2}, {0, 0}));
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_DOUBLE_EQ(y[1], 0.5);
}

TEST(Primitives, LayerNormOfTwoValues) {
  auto y = layer_norm(T::from({2}, {4, 6}), T::full({2}, 1.0), T::zeros({2}), 1e-5);
  EXPECT_NEAR(y[0], -1.0, 1e-4);
  EXPECT_NEAR(y[1], 1.0, 1e-4);
}

TEST(Primitives, MeanOverAxisZero) {
  auto y = apply_primitive<double>("mean_over_axis", {T::from({2, 2}, {1, 0, 3, 0})}, {.axis = 0, .eps = 1e-5, .factor = 1.0, .ids = {}, .ids_shape = {}});
  EXPECT_EQ(y.shape(), (Shape{2}));
  EXPECT_EQ(to_vec(y), (std::vector<double>{2, 0}));
}

TEST(Primitives, ShapeMismatchNamesBothShapes) {
  try {
    matmul(T::zeros({2, 3}), T::zeros({2, 3}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3]"), std::string::npos);
  }
  EXPECT_THROW(add(T::zeros({2, 3}), T::zeros({3, 2})), ShapeError);
}

TEST(Primitives, UnknownKindRejected) {
  EXPECT_THROW(primitive_from_name("convolve"), std::invalid_argument);
}

TEST(Primitives, LayerNormRequiresPositiveEps) {
  EXPECT_THROW(layer_norm(T::zeros({2}), T::full({2}, 1.0), T::zeros({2}), 0.0), std::invalid_argument);
}

TEST(Primitives, EmbeddingLookupRejectsOutOfRangeIds) {
  auto table = T::zeros({4, 2});
  EXPECT_THROW(embedding_lookup(table, {4}, {1}), std::out_of_range);
}

TEST(Backward, SquareGradient) {
  auto x = T::from({3}, {1, 2, 3}, true);
  backward(sum(mul(x, x)));
  EXPECT_EQ(to_vec(Tensor<double>::from({3}, {x.grad().begin(), x.grad().end()})), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, MatmulGradients) {
  auto a = T::from({1, 2}, {1, 1}, true);
  auto b = T::from({2, 1}, {2, 3}, true);
  backward(sum(matmul(a, b)));
  EXPECT_EQ(std::vector<double>(a.grad().begin(), a.grad().end()), (std::vector<double>{2, 3}));
  EXPECT_EQ(std::vector<double>(b.grad().begin(), b.grad().end()), (std::vector<double>{1, 1}));
}

TEST(Backward, FanOutAccumulatesExactly) {
  auto x = T::from({4}, {0.3, -1.7, 2.0, 5.5}, true);
  backward(add(sum(x), sum(x)));
  for (double g : x.grad()) EXPECT_EQ(g, 2.0);
}

TEST(Backward, RejectsNonScalarDetachedAndRepeated) {
  auto x = T::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(mul(x, x)), GraphError);
  EXPECT_THROW(backward(sum(T::from({2}, {1, 2}))), GraphError);
  auto loss = sum(mul(x, x));
  backward(loss);
  EXPECT_THROW(backward(loss), GraphError);
}

TEST(Backward, NoGradGuardSkipsTape) {
  auto x = T::from({2}, {1, 2}, true);
  NoGradGuard guard;
  EXPECT_FALSE(sum(x).requires_grad());
}

TEST(Backward, LayerNormReluSumMatchesFiniteDifferences) {
  Rng rng(11);
  auto gain = random_tensor({4}, rng, 0.5, 1.5);
  auto bias = random_tensor({4}, rng);
  auto x = random_tensor({3, 4}, rng);
  auto f = [&](const T& v) { return sum(relu(layer_norm(v, gain, bias, 1e-5))); };
  EXPECT_LE(grad_check<double>(f, x, 1e-5), 1e-5);
}

TEST(GradCheck, LinearProgramIsExact) {
  // Dyadic inputs and step keep every sum exact.
  auto x = T::from({2, 3}, {1, -2, 3, 0.5, 4, -8});
  auto err = grad_check<double>([](const T& v) { return sum(v); }, x, std::ldexp(1.0, -16));
  EXPECT_EQ(err, 0.0);
}

TEST(GradCheck, SoftmaxCrossEntropyComposite) {
  Rng rng(5);
  auto x = random_tensor({3, 5}, rng);
  std::vector<int> labels{1, 4, 2};
  auto err = grad_check<double>(
      [&](const T& v) { return smoothed_cross_entropy_logits(v, labels, 0.1, -1); }, x, 1e-5);
  EXPECT_LE(err, 1e-5);
}

TEST(GradCheck, CosineSimilarityOfVectors) {
  Rng rng(8);
  auto a = random_tensor({6}, rng);
  auto b = random_tensor({6}, rng);
  auto cosine = [&](const T& v) {
    auto dot = sum(mul(v, b));
    auto nv = sqrt(sum(mul(v, v)));
    auto nb = sqrt(sum(mul(b, b)));
    return divide(dot, mul(nv, nb));
  };
  EXPECT_LE(grad_check<double>(cosine, a, 1e-5), 1e-5);
}

TEST(GradCheck, NonFiniteEvaluationRejected) {
  auto x = T::from({2}, {0.0, 1.0});
  EXPECT_THROW(grad_check<double>([](const T& v) { return sum(log(v)); }, x, 1e-5), NonFiniteError);
}

// Every differentiable primitive, 10 seeded inputs in [-2, 2].
class PrimitiveGradients : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradients, WithinTolerance) {
  Rng rng(1000 + GetParam());
  auto other = random_tensor({3, 4}, rng);
  auto w = random_tensor({4, 2}, rng);
  auto gain = random_tensor({4}, rng);
  auto bias = random_tensor({4}, rng);
  auto x = random_tensor({3, 4}, rng);
  // Weighted sums make every output coordinate matter.
  auto weights = random_tensor({3, 4}, rng);
  auto wsum = [&](const T& y) { return sum(mul(y, weights)); };
  const double tol = 1e-5;
  EXPECT_LE(grad_check<double>([&](const T& v) { return wsum(add(v, other)); }, x), tol);
  EXPECT_LE(grad_check<double>([&](const T& v) { return wsum(sub(other, v)); }, x), tol);
  EXPECT_LE(grad_check<double>([&](const T& v) { return wsum(mul(v, other)); }, x), tol);
  EXPECT_LE(grad_check<double>([&](const T& v) { return sum(mul(matmul(v, w), matmul(other, w))); }, x), tol);
  EXPECT_LE(grad_check<double>([&](const T& v) { return sum(mul(matmul(other, w), matmul(v, w))); }, x), tol);
  EXPECT_LE(grad_check<double>(
                [&](const T& v) { return sum(mul(concat_last_axis<double>({v, other}), concat_last_axis<double>({weights, v}))); },
                x),
            tol);
  EXPECT_LE(grad_check<double>([&](const T& v) { return sum(mul(mean_over_axis(v, 0), gain)); }, x), tol);
  EXPECT_LE(grad_check<double>([&](const T& v) { return wsum(softmax_last_axis(v)); }, x), tol);
  EXPECT_LE(grad_check<double>([&](const T& v) { return wsum(log_softmax_last_axis(v)); }, x), tol);
  EXPECT_LE(grad_check<double>([&](const T& v) { return wsum(layer_norm(v, gain, bias, 1e-5)); }, x), tol);
  EXPECT_LE(grad_check<double>([&](const T& v) { return wsum(relu(v)); }, x), tol);
  EXPECT_LE(grad_check<double>([&](const T& v) { return wsum(sigmoid(v)); }, x), tol);
  EXPECT_LE(grad_check<double>([&](const T& v) { return wsum(scale(v, 2.5)); }, x), tol);
  EXPECT_LE(grad_check<double>([&](const T& v) { return sum(mul(transpose_last_two(v), transpose_last_two(weights))); }, x),
            tol);
  // Gain and bias as the differentiated inputs of layer_norm.
  EXPECT_LE(grad_check<double>([&](const T& g) { return wsum(layer_norm(x, g, bias, 1e-5)); }, gain), tol);
  EXPECT_LE(grad_check<double>([&](const T& b) { return wsum(layer_norm(x, gain, b, 1e-5)); }, bias), tol);
  // Embedding table with a repeated id; unused rows must stay at zero gradient.
  auto table = random_tensor({5, 4}, rng);
  std::vector<int> ids{3, 1, 3};
  EXPECT_LE(grad_check<double>([&](const T& t) { return wsum(embedding_lookup(t, ids, {3})); }, table), tol);
}

INSTANTIATE_TEST_SUITE_P(Seeds, PrimitiveGradients, ::testing::Range(0, 10));

TEST(Properties, SoftmaxRowsArePositiveAndSumToOne) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    auto y = softmax_last_axis(random_tensor({4, 7}, rng, -20, 20));
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0;
      for (std::size_t j = 0; j < 7; ++j) {
        const double v = y[r * 7 + j];
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
        total += v;
      }
      EXPECT_NEAR(total, 1.0, 1e-9);
    }
  }
}

TEST(Properties, LayerNormCentersAndIsNearlyIdempotent) {
  // Re-normalizing rescales by ~1 + eps/2 * (1/var - 1), so the 1e-5 bound
  // needs rows whose variance is not tiny; 16 features in [-2, 2] give that.
  Rng rng(4);
  const std::size_t d = 16;
  auto ones = T::full({d}, 1.0);
  auto zeros = T::zeros({d});
  for (int trial = 0; trial < 10; ++trial) {
    auto x = random_tensor({5, d}, rng);
    auto y = layer_norm(x, ones, zeros, 1e-5);
    auto yy = layer_norm(y, ones, zeros, 1e-5);
    for (std::size_t r = 0; r < 5; ++r) {
      double m = 0;
      for (std::size_t j = 0; j < d; ++j) m += y[r * d + j];
      EXPECT_NEAR(m / static_cast<double>(d), 0.0, 1e-6);
    }
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(yy[i], y[i], 1e-5);
  }
}

TEST(Properties, ConcatThenSliceRecoversInputsBitExactly) {
  Rng rng(6);
  auto a = random_tensor({2, 3, 2}, rng);
  auto b = random_tensor({2, 3, 5}, rng);
  auto c = concat_last_axis<double>({a, b});
  EXPECT_EQ(to_vec(slice_last_axis(c, 0, 2)), to_vec(a));
  EXPECT_EQ(to_vec(slice_last_axis(c, 2, 7)), to_vec(b));
}

TEST(Properties, BatchedMatmulMatchesPerBatchProducts) {
  Rng rng(7);
  auto a = random_tensor({2, 3, 4}, rng);
  auto b = random_tensor({2, 4, 5}, rng);
  auto c = matmul(a, b);
  for (std::size_t i = 0; i < 2; ++i) {
    auto ai = T::from({3, 4}, {a.values().begin() + i * 12, a.values().begin() + (i + 1) * 12});
    auto bi = T::from({4, 5}, {b.values().begin() + i * 20, b.values().begin() + (i + 1) * 20});
    auto ci = matmul(ai, bi);
    for (std::size_t j = 0; j < 15; ++j) EXPECT_EQ(c[i * 15 + j], ci[j]);
  }
}

}  // namespace
}  // namespace pinmt
