#include <gtest/gtest.h>

#include <cmath>

#include "support/helpers.hpp"
#include "tcaf/losses.hpp"

using namespace tcaf;
using tcaf::testing::random_sample;
using tcaf::testing::tiny_arch;

TEST(CrossEntropy, EqualLogitsGiveLogK) {
  const auto theta_o = Tensor<double>::zeros(Shape{2, 3});
  const auto theta_w = Tensor<double>::matrix(4, 3, {1, 2, 3, 4, 5, 6, 7, 8, 9, 1, 1, 1});
  const std::size_t gt[] = {0, 3};
  EXPECT_NEAR(cross_entropy_loss(theta_o, theta_w, gt).item(), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, DominantCorrectLogit) {
  const auto theta_o = Tensor<double>::matrix(1, 1, {1.0});
  const auto theta_w = Tensor<double>::matrix(2, 1, {100.0, -100.0});
  const std::size_t gt[] = {0};
  EXPECT_LT(cross_entropy_loss(theta_o, theta_w, gt).item(), 1e-80);
}

TEST(CrossEntropy, ClosedForm) {
  // logits (1, 0) from theta_o = [1] and theta_w = [[1], [0]]
  const auto theta_o = Tensor<double>::matrix(1, 1, {1.0});
  const auto theta_w = Tensor<double>::matrix(2, 1, {1.0, 0.0});
  const std::size_t gt[] = {0};
  const double oracle = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  EXPECT_NEAR(oracle, 0.31326, 1e-5);
  EXPECT_NEAR(cross_entropy_loss(theta_o, theta_w, gt).item(), oracle, 1e-14);
}

TEST(Regression, Cases) {
  const auto a = Tensor<double>::matrix(2, 2, {1, 2, 3, 4});
  EXPECT_EQ(regression_loss(a, a).item(), 0.0);
  const auto b = Tensor<double>::matrix(2, 2, {2, 3, 4, 5});
  EXPECT_DOUBLE_EQ(regression_loss(a, b).item(), 1.0);
  const auto c = Tensor<double>::matrix(1, 2, {0, 0}), d = Tensor<double>::matrix(1, 2, {1, 3});
  EXPECT_DOUBLE_EQ(regression_loss(c, d).item(), 5.0);
}

TEST(Reconstruction, Cases) {
  const auto w = Tensor<double>::matrix(2, 2, {1, 2, 3, 4});
  EXPECT_EQ(reconstruction_loss(w, w, w).item(), 0.0);
  const auto w1 = Tensor<double>::matrix(2, 2, {2, 3, 4, 5});
  EXPECT_DOUBLE_EQ(reconstruction_loss(w, w1, w).item(), 1.0);
  const auto r = Tensor<double>::matrix(2, 2, {0, 1, 5, 2});
  EXPECT_EQ(reconstruction_loss(r, w1, w).item(), reconstruction_loss(w1, r, w).item());
}

namespace {

struct Batch {
  std::vector<AVSample> samples;
  std::vector<ClipView> views;
  std::vector<std::size_t> gt;
  Tensor<double> embeddings;
};

Batch make_batch(std::uint64_t seed) {
  RngStream rng(seed, "batch");
  Batch b;
  for (std::size_t i = 0; i < 4; ++i) b.samples.push_back(random_sample(rng, 6, 5, 1 + i % 3, 2));
  for (const auto& s : b.samples) b.views.push_back(s.view());
  b.gt = {0, 2, 1, 2};
  std::vector<double> w(3 * 8);
  for (auto& x : w) x = rng.normal();
  b.embeddings = Tensor<double>(Shape{3, 8}, std::move(w));
  return b;
}

}  // namespace

TEST(TotalLoss, FullIsSumOfTerms) {
  TcafModel<double> m(tiny_arch(), 1);
  const Batch b = make_batch(1);
  RngStream rng(2, "loss");
  const auto l = total_loss(m, b.views, b.gt, b.embeddings, LossConfig{}, Mode::train, rng);
  EXPECT_EQ(l.total_value, (l.l_reg + l.l_ce) + l.l_rec);
  EXPECT_GE(l.l_ce, 0.0);
  EXPECT_GE(l.l_reg, 0.0);
  EXPECT_GE(l.l_rec, 0.0);
  EXPECT_GE(l.total_value, std::max({l.l_ce, l.l_reg, l.l_rec}));
  EXPECT_TRUE(std::isfinite(l.total_value));
}

TEST(TotalLoss, RegressionOnly) {
  TcafModel<double> m(tiny_arch(), 1);
  const Batch b = make_batch(2);
  RngStream rng(2, "loss");
  const auto l = total_loss(m, b.views, b.gt, b.embeddings, LossConfig::parse("reg"), Mode::train, rng);
  EXPECT_EQ(l.total_value, l.l_reg);
  EXPECT_EQ(l.l_ce, 0.0);
  EXPECT_EQ(l.l_rec, 0.0);
  m.zero_grad();
  backward(l.total);
  for (const auto& [name, p] : m.parameters()) {
    if (name.rfind("d_o.", 0) == 0 || name.rfind("d_w.", 0) == 0) EXPECT_FALSE(p.has_grad()) << name;
  }
}

TEST(TotalLoss, ConfigNames) {
  for (const char* n : {"reg", "reg+ce", "full"}) EXPECT_EQ(LossConfig::parse(n).name(), n);
  EXPECT_THROW(LossConfig::parse("ce"), ConfigError);
}

TEST(TotalLoss, FiniteAndNonNegativeAcrossSeeds) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    TcafModel<float> m(tiny_arch(), seed);
    RngStream rng(seed, "batch");
    std::vector<AVSample> samples;
    std::vector<ClipView> views;
    for (int i = 0; i < 3; ++i) samples.push_back(random_sample(rng, 6, 5, 3, 3));
    for (const auto& s : samples) views.push_back(s.view());
    const std::size_t gt[] = {0, 1, 1};
    const auto w = Tensor<float>::full(Shape{2, 8}, 0.5f);
    const auto l = total_loss(m, views, gt, w, LossConfig{}, Mode::train, rng);
    EXPECT_TRUE(std::isfinite(l.total_value));
    EXPECT_GE(l.total_value, l.l_reg);
  }
}

TEST(TotalLoss, LabelOutsideSeenSetThrows) {
  TcafModel<double> m(tiny_arch(), 1);
  Batch b = make_batch(3);
  b.gt[0] = 3;
  RngStream rng(2, "loss");
  EXPECT_THROW(total_loss(m, b.views, b.gt, b.embeddings, LossConfig{}, Mode::train, rng), DataError);
}
