#include <gtest/gtest.h>

#include <chrono>
#include <cmath>

#include "ovsh/theory.hpp"

using namespace ovsh::theory;

namespace {

BoundProbe uniform4() {
  BoundProbe p;
  p.scores = {0, 0, 0, 0};
  p.gold = 2;
  p.k = 1;
  return p;
}

// Plain cross-entropy on softmax(s), independent of the scaled formulation.
double cross_entropy(const std::vector<double>& s, std::size_t y) {
  double mx = s[0];
  for (double v : s) mx = std::max(mx, v);
  double z = 0;
  for (double v : s) z += std::exp(v - mx);
  return -(s[y] - mx - std::log(z));
}

}  // namespace

TEST(ScaledLoss, UniformScoresGiveLogV) {
  EXPECT_NEAR(scaled_ntp_loss(uniform4()), std::log(4.0), 1e-12);
}

TEST(ScaledLoss, GoldDominatesToZero) {
  auto p = uniform4();
  p.scores[p.gold] = 60;
  EXPECT_LT(scaled_ntp_loss(p), 1e-25);
  EXPECT_GE(scaled_ntp_loss(p), 0.0);
}

TEST(ScaledLoss, LongConditionLimit) {
  // 1/h(k) -> 0: off-gold exponents collapse to e^0.
  BoundProbe p;
  p.scores = {1.5, 2.0, 0.7, 3.1};
  p.gold = 0;
  p.k = 1e12;
  const double expected = std::log(1 + 3 * std::exp(-1.5));
  EXPECT_NEAR(scaled_ntp_loss(p), expected, 1e-9);
}

TEST(ScaledLoss, UnitLengthMapIsCrossEntropy) {
  for (std::uint64_t t = 0; t < 200; ++t) {
    auto p = random_probe(11, t);
    p.h = [](double) { return 1.0; };
    EXPECT_NEAR(scaled_ntp_loss(p), cross_entropy(p.scores, p.gold), 1e-12);
  }
}

TEST(GradNormBound, UniformFourTokenExample) {
  auto sides = grad_norm_bound(uniform4());
  EXPECT_NEAR(sides.lhs, std::sqrt(0.75), 1e-12);
  EXPECT_NEAR(sides.rhs, std::sqrt(10.0) * 0.75, 1e-12);
  EXPECT_LE(sides.lhs, sides.rhs);
}

TEST(GradNormBound, BothSidesVanishAsGoldDominates) {
  auto p = uniform4();
  p.scores[p.gold] = 50;
  auto sides = grad_norm_bound(p);
  EXPECT_LT(sides.lhs, 1e-20);
  EXPECT_LT(sides.rhs, 1e-20);
}

TEST(GradNormBound, ClosedFormMatchesFiniteDifferences) {
  for (std::uint64_t t = 0; t < 500; ++t) {
    auto p = random_probe(5, t);
    EXPECT_LE(vector_relative_error(scaled_ntp_grad(p), finite_difference_grad(p)), 1e-5) << describe(p);
  }
}

TEST(GradNormBound, UniformlyScaledNormalizerCanGoNegative) {
  // Scaling the gold score inside the normalizer breaks the bound once the gold
  // score dominates; the loss's own normalizer never does.
  BoundProbe p;
  p.scores = {5.0, 0.0};
  p.gold = 0;
  p.k = 100;
  EXPECT_LT(uniformly_scaled_rhs(p), 0.0);
  auto sides = grad_norm_bound(p);
  EXPECT_GT(sides.rhs, 0.0);
  EXPECT_LE(sides.lhs, sides.rhs);
  // Both readings coincide at h(k) = 1.
  p.k = 1;
  EXPECT_NEAR(uniformly_scaled_rhs(p), grad_norm_bound(p).rhs, 1e-12);
}

TEST(GradNormBound, CustomLengthMap) {
  auto p = random_probe(3, 0);
  p.h = [](double k) { return std::sqrt(k); };
  auto sides = grad_norm_bound(p);
  EXPECT_LE(sides.lhs, sides.rhs + 1e-9);
}

TEST(BoundPropertyTest, TenThousandProbesNoViolations) {
  auto start = std::chrono::steady_clock::now();
  auto rep = bound_property_test(10000, 2024);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_EQ(rep.trials, 10000u);
  EXPECT_EQ(rep.violations, 0u) << (rep.failures.empty() ? "" : rep.failures.front());
  EXPECT_EQ(rep.fd_failures, 0u);
  EXPECT_LE(rep.max_slack_ratio, 1.0 + 1e-12);  // tight at V = 2
  EXPECT_LT(secs, 30.0);
}

TEST(BoundPropertyTest, SingleTrialDeterministic) {
  auto a = bound_property_test(1, 99);
  auto b = bound_property_test(1, 99);
  EXPECT_EQ(a.max_slack_ratio, b.max_slack_ratio);
  EXPECT_EQ(a.max_fd_rel_error, b.max_fd_rel_error);
  EXPECT_THROW(bound_property_test(0, 1), ovsh::InputError);
}

TEST(BoundProbe, Validation) {
  BoundProbe p;
  EXPECT_THROW(scaled_ntp_loss(p), ovsh::InputError);
  p.scores = {1, 2};
  p.gold = 2;
  EXPECT_THROW(scaled_ntp_loss(p), ovsh::InputError);
  p.gold = 0;
  p.k = 0.5;
  EXPECT_THROW(scaled_ntp_loss(p), ovsh::InputError);
}
