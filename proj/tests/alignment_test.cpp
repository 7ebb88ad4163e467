#include <gtest/gtest.h>

#include "pinmt/alignment.hpp"
#include "pinmt/grad_check.hpp"
#include "test_util.hpp"

namespace pinmt {
namespace {

using T = Tensor<double>;
using testing::random_tensor;

T mat(std::size_t rows, std::size_t cols, std::vector<double> v, bool grad = false) {
  return T::from({rows, cols}, std::move(v), grad);
}

TEST(Cosine, Examples) {
  Rng rng(1);
  auto a = random_tensor({4, 3}, rng);
  EXPECT_NEAR(cosine_alignment(a, a.clone()).item(), 1.0, 1e-9);
  EXPECT_NEAR(cosine_alignment(mat(2, 2, {1, 0, 3, 0}), mat(1, 2, {0, 2})).item(), 0.0, 1e-9);
  EXPECT_NEAR(cosine_alignment(mat(1, 2, {1, 1}), mat(1, 2, {2, 2})).item(), 1.0, 1e-9);
}

TEST(Cosine, ScaleInvarianceAndSymmetry) {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_tensor({3, 5}, rng);
    auto b = random_tensor({4, 5}, rng);
    const double base = cosine_alignment(a, b).item();
    const double lam = rng.uniform(0.1, 10), mu = rng.uniform(0.1, 10);
    EXPECT_NEAR(cosine_alignment(scale(a, lam), scale(b, mu)).item(), base, 1e-9);
    EXPECT_NEAR(cosine_alignment(b, a).item(), base, 1e-9);
    EXPECT_GE(base, -1.0);
    EXPECT_LE(base, 1.0);
  }
}

TEST(Cosine, ZeroNormIsRejected) {
  EXPECT_THROW(cosine_alignment(mat(2, 2, {1, 1, -1, -1}), mat(1, 2, {1, 0})), DegenerateInputError);
  EXPECT_THROW(cosine_alignment(mat(1, 2, {1, 0}), mat(1, 2, {0, 0})), DegenerateInputError);
  EXPECT_THROW(cosine_alignment(mat(1, 2, {1, 0}), mat(1, 3, {0, 0, 1})), ShapeError);
}

TEST(Cosine, BatchedMeansSkipPadding) {
  // Row 0 has one real position, row 1 two. Pad rows carry junk that must not count.
  auto plm = T::from({2, 2, 2}, {1, 0, 99, 99, 1, 1, 3, 3});
  auto site = T::from({2, 2, 2}, {5, 0, -7, 4, 2, 2, 1, 1});
  std::vector<std::uint8_t> keep_plm{1, 0, 1, 1}, keep_site{1, 0, 1, 1};
  EXPECT_NEAR(cosine_alignment_means(plm, keep_plm, site, keep_site).item(), 1.0, 1e-9);
}

TEST(Cosine, GradientReachesSiteOnly) {
  Rng rng(3);
  auto plm = random_tensor({3, 4}, rng, -2, 2, true);
  auto site = random_tensor({5, 4}, rng, -2, 2, true);
  backward(cosine_alignment(plm, site));
  EXPECT_FALSE(plm.has_grad());
  ASSERT_TRUE(site.has_grad());

  auto p3 = random_tensor({2, 3, 4}, rng, -2, 2, true);
  auto s3 = random_tensor({2, 3, 4}, rng, -2, 2, true);
  std::vector<std::uint8_t> keep{1, 1, 0, 1, 1, 1};
  backward(add(cosine_alignment_positions(p3, s3, keep), mse_distill(p3, keep, s3, keep, AlignSite::decoder)));
  EXPECT_FALSE(p3.has_grad());
  EXPECT_TRUE(s3.has_grad());
}

TEST(Cosine, GradientStepIncreasesSimilarity) {
  Rng rng(4);
  AlignmentSpec spec{AlignKind::cosine, AlignSite::decoder, 1.0, SignMode::maximize_alignment};
  for (int trial = 0; trial < 20; ++trial) {
    auto plm = random_tensor({4, 6}, rng);
    auto site = random_tensor({5, 6}, rng, -2, 2, true);
    const double before = cosine_alignment(plm, site).item();
    backward(total_loss(T::scalar(0.0), cosine_alignment(plm, site), spec));
    std::vector<double> next(site.values().begin(), site.values().end());
    for (std::size_t i = 0; i < next.size(); ++i) next[i] -= 0.01 * site.grad()[i];
    const double after = cosine_alignment(plm, T::from(site.shape(), next)).item();
    EXPECT_GT(after, before) << trial;
  }
}

TEST(Cosine, MatchesFiniteDifferences) {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    auto plm = random_tensor({3, 4}, rng);
    auto site = random_tensor({5, 4}, rng);
    EXPECT_LE(grad_check<double>([&](const T& x) { return cosine_alignment(plm, x); }, site, 1e-6), 1e-6);
    auto p3 = random_tensor({2, 3, 4}, rng);
    auto s3 = random_tensor({2, 3, 4}, rng);
    std::vector<std::uint8_t> keep{1, 1, 1, 1, 1, 0};
    EXPECT_LE(grad_check<double>([&](const T& x) { return cosine_alignment_positions(p3, x, keep); }, s3, 1e-6), 1e-6);
    EXPECT_LE(grad_check<double>([&](const T& x) { return cosine_alignment_means(p3, keep, x, keep); }, s3, 1e-6),
              1e-6);
  }
}

TEST(Mse, Examples) {
  Rng rng(6);
  auto a = random_tensor({3, 4}, rng);
  EXPECT_EQ(mse_distill(a, a.clone(), AlignSite::encoder).item(), 0.0);
  EXPECT_EQ(mse_distill(mat(1, 2, {1, 2}), mat(1, 2, {3, 4}), AlignSite::encoder).item(), 4.0);
  EXPECT_EQ(mse_distill(mat(2, 2, {0, 0, 2, 2}), mat(1, 2, {0, 2}), AlignSite::decoder).item(), 1.0);
}

TEST(Mse, NonNegativeAndZeroOnlyWhenEqual) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({3, 4}, rng);
    EXPECT_GT(mse_distill(a, b, AlignSite::encoder).item(), 1e-12);
    EXPECT_GE(mse_distill(a, random_tensor({2, 4}, rng), AlignSite::decoder).item(), 0.0);
    EXPECT_LE(mse_distill(a, a.clone(), AlignSite::encoder).item(), 1e-12);
  }
}

TEST(Mse, EncoderSiteNeedsEqualLengths) {
  EXPECT_THROW(mse_distill(mat(2, 2, {0, 0, 2, 2}), mat(1, 2, {0, 2}), AlignSite::encoder), ShapeError);
  auto a = T::zeros({1, 2, 2}), b = T::zeros({1, 2, 2});
  EXPECT_THROW(mse_distill(a, {1, 1}, b, {1, 0}, AlignSite::encoder), ShapeError);
}

TEST(Mse, MatchesFiniteDifferences) {
  Rng rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    auto plm = random_tensor({2, 3, 4}, rng);
    auto site = random_tensor({2, 3, 4}, rng);
    std::vector<std::uint8_t> keep{1, 1, 0, 1, 1, 1};
    for (auto s : {AlignSite::encoder, AlignSite::decoder})
      EXPECT_LE(grad_check<double>([&](const T& x) { return mse_distill(plm, keep, x, keep, s); }, site, 1e-6), 1e-6);
  }
}

TEST(TotalLoss, Examples) {
  const auto ce = T::scalar(2.0), sim = T::scalar(0.8);
  AlignmentSpec spec{AlignKind::cosine, AlignSite::decoder, 500.0, SignMode::maximize_alignment};
  EXPECT_NEAR(total_loss(ce, sim, spec).item(), 102.0, 1e-9);
  spec.sign_mode = SignMode::paper_literal;
  EXPECT_NEAR(total_loss(ce, sim, spec).item(), 402.0, 1e-9);
  spec.kind = AlignKind::mse;
  spec.sign_mode = SignMode::maximize_alignment;
  EXPECT_NEAR(total_loss(ce, sim, spec).item(), 402.0, 1e-9);
  for (auto mode : {SignMode::paper_literal, SignMode::maximize_alignment}) {
    spec.alpha = 0;
    spec.sign_mode = mode;
    EXPECT_EQ(total_loss(ce, sim, spec).item(), 2.0);
  }
  spec.kind = AlignKind::none;
  spec.alpha = 500;
  EXPECT_EQ(total_loss(ce, sim, spec).item(), 2.0);
  spec.alpha = -1;
  EXPECT_THROW(total_loss(ce, sim, spec), std::invalid_argument);
}

TEST(TotalLoss, Names) {
  EXPECT_EQ(align_kind_from_name(align_kind_name(AlignKind::mse)), AlignKind::mse);
  EXPECT_EQ(align_site_from_name("encoder"), AlignSite::encoder);
  EXPECT_EQ(sign_mode_from_name("paper_literal"), SignMode::paper_literal);
  EXPECT_THROW(align_kind_from_name("kl"), std::invalid_argument);
}

}  // namespace
}  // namespace pinmt
