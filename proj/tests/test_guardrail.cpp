#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "ovsh/guardrail.hpp"

using namespace ovsh;
using ovsh::testing::FnOracle;
using ovsh::testing::TableOracle;

namespace {

std::vector<double> normalized(std::vector<double> w) {
  double s = 0;
  for (double v : w) s += v;
  for (auto& v : w) v /= s;
  return w;
}

}  // namespace

TEST(PlausibleSet, Threshold) {
  std::vector<double> p{0.5, 0.3, 0.15, 0.05};
  EXPECT_EQ(plausible_set(p, 0.2), (TokenSet{0, 1, 2}));
  std::vector<double> tie{0.4, 0.4, 0.2};
  EXPECT_EQ(plausible_set(tie, 1.0), (TokenSet{0, 1}));
  std::vector<double> u(8, 0.125);
  EXPECT_EQ(plausible_set(u, 1.0).size(), 8u);
  EXPECT_EQ(plausible_set(u, 0.01).size(), 8u);
}

TEST(PlausibleSet, RejectsNonDistributions) {
  EXPECT_THROW(plausible_set(std::vector<double>{0.5, 0.6}, 0.1), InputError);
  EXPECT_THROW(plausible_set(std::vector<double>{1.2, -0.2}, 0.1), InputError);
  EXPECT_THROW(plausible_set(std::vector<double>{}, 0.1), InputError);
  EXPECT_THROW(plausible_set(std::vector<double>{1.0}, 0.0), InputError);
}

TEST(Pmi, Identities) {
  EXPECT_NEAR(pmi_token(0.3, 0.3), 0.0, 1e-12);
  EXPECT_NEAR(pmi_token(0.3, 0.0), std::log(2.0), 1e-12);
  EXPECT_NEAR(pmi_token(0.3, 1e-300), std::log(2.0), 1e-12);
  EXPECT_NEAR(pmi_token(0.1, 0.3), -std::log(2.0), 1e-12);
  EXPECT_EQ(ppmi_token(0.1, 0.3), 0.0);
  EXPECT_THROW(pmi_token(0.0, 0.1), InputError);
  EXPECT_THROW(pmi_token(0.1, -0.1), InputError);
}

TEST(Pmi, BoundedByLn2) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(1e-9, 1.0);
  for (int i = 0; i < 1000; ++i) EXPECT_LE(pmi_token(u(rng), u(rng)), std::log(2.0));
}

TEST(EscapeSet, Difference) {
  EXPECT_TRUE(escape_set({1, 2, 3}, {1, 2, 3}).empty());
  EXPECT_EQ(escape_set({1, 2, 3}, {2, 3}), (TokenSet{1}));
  EXPECT_TRUE(escape_set({2, 3}, {1, 2, 3, 4}).empty());
}

TEST(Epm, Arithmetic) {
  std::vector<double> p{0.2, 0.1, 0.6, 0.1};
  EXPECT_EQ(epm_penalty(p, {0, 1, 2, 3}, {}, 0.5), 0.0);
  EXPECT_NEAR(epm_penalty(p, {0, 1, 2, 3}, {0}, 0.5), std::log(0.25), 1e-12);
  EXPECT_NEAR(epm_penalty(p, {0, 1, 2, 3}, {1}, 1.0), 0.0, 1e-12);
  EXPECT_THROW(epm_penalty(p, {0, 1}, {2}, 0.5), InputError);
}

TEST(ContrastScore, ZeroForIdenticalDistributions) {
  auto p = normalized({5, 3, 1, 1});
  DetectorConfig cfg;
  auto c = contrast_score(p, p, cfg);
  EXPECT_EQ(c.score, 0.0);
  EXPECT_TRUE(c.vesc.empty());
}

TEST(ContrastScore, MonotoneInDroppedProbabilities) {
  auto full = normalized({4, 3, 2, 1, 0.01});
  auto drop = normalized({4, 3.5, 2, 1, 0.01});
  DetectorConfig cfg;
  auto a = contrast_score(full, drop, cfg);
  ASSERT_EQ(a.vtop, (TokenSet{0, 1, 2, 3}));
  // Lower p(y|x') on every plausible token; the freed mass goes off the set.
  auto lower = drop;
  for (std::size_t v = 0; v < 4; ++v) lower[v] *= 0.8;
  lower[4] += 1 - std::accumulate(lower.begin(), lower.end(), 0.0);
  auto b = contrast_score(full, lower, cfg);
  EXPECT_EQ(a.vtop, b.vtop);
  EXPECT_GT(b.ppmi, a.ppmi);
}

TEST(ContrastScore, VocabularyPermutationInvariant) {
  auto full = normalized({4, 3, 2, 1, 0.5, 0.2});
  auto drop = normalized({1, 3, 2, 4, 0.1, 0.2});
  std::vector<std::size_t> perm{3, 5, 0, 1, 4, 2};
  std::vector<double> pf(6), pd(6);
  for (std::size_t i = 0; i < 6; ++i) {
    pf[perm[i]] = full[i];
    pd[perm[i]] = drop[i];
  }
  for (auto agg : {Aggregation::mean, Aggregation::sum}) {
    DetectorConfig cfg;
    cfg.aggregation = agg;
    EXPECT_NEAR(contrast_score(full, drop, cfg).score, contrast_score(pf, pd, cfg).score, 1e-12);
  }
}

TEST(ContrastScore, SumAggregationScalesMean) {
  auto full = normalized({4, 3, 2, 1});
  auto drop = normalized({1, 1, 2, 4});
  DetectorConfig mean_cfg, sum_cfg;
  mean_cfg.apc_ratio = sum_cfg.apc_ratio = 0.2;
  sum_cfg.aggregation = Aggregation::sum;
  auto m = contrast_score(full, drop, mean_cfg);
  auto s = contrast_score(full, drop, sum_cfg);
  EXPECT_NEAR(s.ppmi, m.ppmi * double(m.vtop.size()), 1e-12);
}

TEST(DropSpan, RemovesWindow) {
  TokenSeq x{5, 6, 7, 8};
  EXPECT_EQ(drop_span(x, 0, 1), (TokenSeq{6, 7, 8}));
  EXPECT_EQ(drop_span(x, 2, 2), (TokenSeq{5, 6}));
  EXPECT_EQ(drop_span(x, 3, 5), (TokenSeq{5, 6, 7}));
}

TEST(PositionScore, InertTokenScoresZero) {
  // Distribution ignores everything except the presence of token 9.
  FnOracle o(6, [](std::span<const TokenId> x) {
    const bool has9 = std::find(x.begin(), x.end(), 9) != x.end();
    return has9 ? std::vector<double>{0.1, 0.6, 0.1, 0.1, 0.05, 0.05} : std::vector<double>{0.6, 0.1, 0.1, 0.1, 0.05, 0.05};
  });
  DetectorConfig cfg;
  TokenSeq x{3, 9, 4};
  auto inert = position_score(o, x, 0, cfg);
  ASSERT_TRUE(inert);
  EXPECT_EQ(inert->score, 0.0);
  EXPECT_EQ(inert->escape_count, 0);
  EXPECT_EQ(inert->dropped_prompt, (TokenSeq{9, 4}));
  auto key = position_score(o, x, 1, cfg);
  ASSERT_TRUE(key);
  EXPECT_NE(key->score, 0.0);
  cfg.drop_width = 3;
  EXPECT_FALSE(position_score(o, x, 0, cfg).has_value());
  EXPECT_THROW(position_score(o, x, 3, DetectorConfig{}), InputError);
}

TEST(Detect, ThresholdExtremes) {
  TableOracle o(4, {0.25, 0.25, 0.25, 0.25});
  o.set({2, 3}, {0.7, 0.1, 0.1, 0.1});
  DetectorConfig cfg;
  cfg.gamma = std::numeric_limits<double>::infinity();
  auto never = detect(o, TokenSeq{2, 3}, cfg);
  EXPECT_FALSE(never.flagged);
  cfg.gamma = -std::numeric_limits<double>::infinity();
  auto always = detect(o, TokenSeq{2, 3}, cfg);
  EXPECT_TRUE(always.flagged);
  EXPECT_THROW(detect(o, TokenSeq{2}, cfg), InputError);
}

TEST(Detect, FmaxIsMaximumOverPositions) {
  FnOracle o(5, [](std::span<const TokenId> x) {
    std::vector<double> w(5, 1.0);
    for (std::size_t i = 0; i < x.size(); ++i) w[std::size_t(x[i]) % 5] += double(i + 1);
    return normalized(w);
  });
  DetectorConfig cfg;
  cfg.apc_ratio = 0.05;
  TokenSeq x{1, 2, 3, 4};
  auto r = detect(o, x, cfg);
  ASSERT_EQ(r.per_position.size(), 4u);
  double mx = -1e300;
  for (const auto& p : r.per_position) mx = std::max(mx, p.score);
  EXPECT_EQ(r.f_max, mx);
  ASSERT_NE(r.best(), nullptr);
  EXPECT_EQ(r.best()->score, r.f_max);
  EXPECT_EQ(r.flagged, r.f_max >= cfg.gamma);
  auto again = detect(o, x, cfg);
  EXPECT_EQ(again.f_max, r.f_max);
  EXPECT_EQ(again.argmax_position, r.argmax_position);
  apply_threshold(r, r.f_max + 1);
  EXPECT_FALSE(r.flagged);
}

TEST(DetectorConfig, Validation) {
  DetectorConfig c;
  c.apc_ratio = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.beta = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.drop_width = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.gamma = std::nan("");
  EXPECT_THROW(c.validate(), ConfigError);
}
