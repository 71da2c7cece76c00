#include <gtest/gtest.h>

#include <random>

#include "ovsh/gsnr.hpp"

using namespace ovsh;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.vocab_size = 30;
  c.embed_dim = 8;
  c.context_len = 8;
  c.layers = 1;
  c.heads = 2;
  c.seed = 4;
  return c;
}

std::vector<Sample> samples(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<TokenId> tok(2, 29);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({{tok(rng), tok(rng), 1}, {tok(rng)}, 0, Branch::popular});
  return out;
}

}  // namespace

TEST(GsnrAccumulator, Arithmetic) {
  GsnrAccumulator a(1);
  a.add({1.0});
  a.add({-1.0});
  EXPECT_EQ(a.gsnr(0), 0.0);

  GsnrAccumulator b(1);
  b.add({1.0});
  b.add({3.0});
  EXPECT_DOUBLE_EQ(b.mean(0), 2.0);
  EXPECT_DOUBLE_EQ(b.variance(0), 1.0);
  EXPECT_NEAR(b.gsnr(0), 4.0 / (1.0 + kGsnrEpsilon), 1e-9);

  GsnrAccumulator c(1);
  c.add({1.0});
  c.add({1.0});
  EXPECT_NEAR(c.gsnr(0), 1e12, 1e-9 * 1e12);
}

TEST(GsnrAccumulator, OrderAndScaleInvariant) {
  std::vector<double> xs{0.3, -1.2, 2.5, 0.9, 0.1};
  GsnrAccumulator fwd(1), rev(1), scaled(1);
  for (double x : xs) {
    fwd.add({x});
    scaled.add({-7.0 * x});
  }
  for (auto it = xs.rbegin(); it != xs.rend(); ++it) rev.add({*it});
  EXPECT_NEAR(fwd.gsnr(0), rev.gsnr(0), 1e-12);
  EXPECT_NEAR(fwd.gsnr(0), scaled.gsnr(0), 1e-9);
  EXPECT_THROW(fwd.add(std::span<const double>()), InputError);
}

TEST(PerSampleGrads, MatchesSingleSampleGrad) {
  auto m = init_model(tiny());
  auto data = samples(3, 1);
  data.push_back(data[1]);
  std::vector<ParamBuffer<float>> seen;
  std::vector<std::size_t> order;
  per_sample_grads<float>(m, data, [&](std::size_t i, std::span<const float> g) {
    order.push_back(i);
    seen.emplace_back(g.begin(), g.end());
  });
  ASSERT_EQ(seen.size(), 4u);
  EXPECT_EQ(order, (std::vector<std::size_t>{0, 1, 2, 3}));
  for (std::size_t i = 0; i < data.size(); ++i)
    EXPECT_EQ(seen[i], grad(m, std::span<const Sample>(data).subspan(i, 1)));
  EXPECT_EQ(seen[1], seen[3]);
}

TEST(Gsnr, ReportShapeAndDeterminism) {
  auto m = init_model(tiny());
  auto data = samples(12, 2);
  auto a = gsnr(m, std::span<const Sample>(data));
  auto b = gsnr(m, std::span<const Sample>(data));
  EXPECT_EQ(a.aggregate, b.aggregate);
  EXPECT_EQ(a.sample_count, 12u);
  EXPECT_EQ(a.per_param_group.size(), m.layout().segments().size());
  double weighted = 0;
  for (const auto& seg : m.layout().segments()) {
    const double v = a.per_param_group.at(seg.name);
    EXPECT_GE(v, 0.0);
    EXPECT_TRUE(std::isfinite(v));
    weighted += v * double(seg.size());
  }
  EXPECT_NEAR(a.aggregate, weighted / double(m.param_count()), 1e-9 * (1 + a.aggregate));
}

TEST(Gsnr, SampleOrderInvariant) {
  auto m = init_model(tiny());
  auto data = samples(10, 3);
  auto a = gsnr(m, std::span<const Sample>(data));
  std::reverse(data.begin(), data.end());
  auto b = gsnr(m, std::span<const Sample>(data));
  EXPECT_NEAR(a.aggregate, b.aggregate, 1e-6 * a.aggregate);
}

TEST(Gsnr, Preconditions) {
  auto m = init_model(tiny());
  auto data = samples(2, 5);
  EXPECT_THROW(gsnr(m, std::span<const Sample>(data).first(1)), InputError);
  EXPECT_THROW(gsnr(m, std::span<const Sample>(data), 0.0), InputError);
  EXPECT_NO_THROW(gsnr(m, std::span<const Sample>(data)));
}
