#include "fewseg/fewseg.hpp"
#include "fewseg/testing/oracle_suite.hpp"

#include <gtest/gtest.h>

using namespace fewseg;
using namespace fewseg::testing;

namespace {

Var<double> probs_of(int h, int w, std::vector<double> v) {
  Tensor<double> t(h, w, 1);
  t.data.assign(v.begin(), v.end());
  return Var<double>::constant(t);
}

BinaryMask mask_of(int h, int w, std::vector<std::uint8_t> v, int cls = 1) {
  BinaryMask m(h, w, cls);
  m.mask = std::move(v);
  return m;
}

Var<double> vec(std::vector<double> v) {
  Tensor<double> t(1, 1, static_cast<int>(v.size()));
  t.data.assign(v.begin(), v.end());
  return Var<double>::constant(t);
}

}  // namespace

TEST(DiceLoss, HandCases) {
  // 2 predicted, 4 true, 2 intersecting.
  const auto y = mask_of(2, 3, {1, 1, 1, 1, 0, 0});
  const auto p = probs_of(2, 3, {1, 1, 0, 0, 0, 0});
  EXPECT_NEAR(dice_loss(p, y, 0.0).item(), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(dice_loss(p, y).item(), 1.0 / 3.0, 1e-5);
  EXPECT_NEAR(dice_loss(probs_of(2, 3, std::vector<double>(6, 0.0)), y).item(), 1.0, 1e-5);
}

TEST(DiceLoss, PerfectPredictionNearZero) {
  BinaryMask y(12, 12, 1);
  std::vector<double> p(144, 0.0);
  for (int i = 0; i < 110; ++i) y.mask[i] = 1, p[i] = 1.0;
  EXPECT_LT(dice_loss(probs_of(12, 12, p), y).item(), 1e-4);
}

TEST(DiceLoss, ShapeMismatch) {
  EXPECT_THROW(dice_loss(probs_of(2, 2, {0, 0, 0, 0}), BinaryMask(2, 3, 1)), ShapeError);
  EXPECT_THROW(bce_loss(probs_of(2, 2, {0, 0, 0, 0}), BinaryMask(3, 2, 1)), ShapeError);
}

TEST(BceLoss, HandCases) {
  const auto y = mask_of(2, 2, {1, 0, 0, 1});
  EXPECT_NEAR(bce_loss(probs_of(2, 2, {0.5, 0.5, 0.5, 0.5}), y).item(), std::log(2.0), 1e-15);
  EXPECT_LE(bce_loss(probs_of(2, 2, {1, 0, 0, 1}), y).item(), 1e-6);
  EXPECT_TRUE(std::isfinite(bce_loss(probs_of(2, 2, {0, 1, 1, 0}), y).item()));
}

TEST(CombinedLoss, MeanOverClasses) {
  const auto y1 = mask_of(1, 2, {1, 0}, 1), y2 = mask_of(1, 2, {0, 1}, 2);
  const auto p1 = probs_of(1, 2, {0.7, 0.2}), p2 = probs_of(1, 2, {0.4, 0.9});
  const double a = dice_loss(p1, y1).item() + bce_loss(p1, y1).item();
  const double b = dice_loss(p2, y2).item() + bce_loss(p2, y2).item();
  EXPECT_NEAR(combined_loss<double>({p1, p2}, {y1, y2}).item(), (a + b) / 2, 1e-15);
  EXPECT_THROW(combined_loss<double>({}, {}), std::invalid_argument);
}

TEST(DeLoss, HandCases) {
  EmbeddingSet<double> one;
  one.query[1] = vec({1, 0});
  one.support[1] = vec({0, 1});
  EXPECT_NEAR(de_loss(one).item(), std::sqrt(2.0), 1e-15);

  EmbeddingSet<double> ideal;
  for (int c = 1; c <= 3; ++c) {
    std::vector<double> v(3, 0.0);
    v[c - 1] = 1.0;
    ideal.query[c] = vec(v);
    ideal.support[c] = vec(v);
  }
  EXPECT_EQ(de_loss(ideal).item(), 0.0);
}

TEST(DeLoss, MismatchedClassSets) {
  EmbeddingSet<double> e;
  e.query[1] = vec({1, 0});
  e.support[2] = vec({1, 0});
  EXPECT_THROW(de_loss(e), std::invalid_argument);
}

TEST(DeLoss, PermutationInvariant) {
  Rng rng(3);
  std::vector<Tensor<double>> q, s;
  for (int i = 0; i < 4; ++i) q.push_back(random_map(1, 1, 5, rng)), s.push_back(random_map(1, 1, 5, rng));
  // Make class 0 active so the loss is nonzero.
  s[1] = s[2] = s[3] = q[0];
  EmbeddingSet<double> a, b;
  const int perm[] = {3, 1, 4, 2};
  for (int i = 0; i < 4; ++i) {
    a.query[i + 1] = Var<double>::constant(q[i]);
    a.support[i + 1] = Var<double>::constant(s[i]);
    b.query[perm[i]] = Var<double>::constant(q[i]);
    b.support[perm[i]] = Var<double>::constant(s[i]);
  }
  EXPECT_GT(de_loss(a).item(), 0.0);
  EXPECT_NEAR(de_loss(a).item(), de_loss(b).item(), 1e-14);
}

TEST(OverallLoss, Composition) {
  const auto c = vec({0.4}), d = vec({0.1});
  EXPECT_NEAR(overall_loss(c, d, 1.0).item(), 0.5, 1e-15);
  EXPECT_EQ(overall_loss(c, d, 0.0).item(), 0.4);
  EXPECT_THROW(overall_loss(c, d, -1.0), std::invalid_argument);
}

TEST(Pooling, ConstantAndZeroFeatures) {
  Tensor<double> f(3, 3, 2);
  for (int p = 0; p < 9; ++p) f.data[p * 2] = 3.0, f.data[p * 2 + 1] = 4.0;
  const auto v = pool_backend_features(Var<double>::constant(f)).value();
  EXPECT_NEAR(v.data[0], 0.6, 1e-15);
  EXPECT_NEAR(v.data[1], 0.8, 1e-15);
  const auto z = pool_backend_features(Var<double>::constant(Tensor<double>(2, 2, 3))).value();
  for (double x : z.data) EXPECT_EQ(x, 0.0);
}

TEST(Embedding, RawModeFlattens) {
  Rng rng(1);
  const auto f = random_map(2, 3, 4, rng);
  const auto e = embed_backend_features(Var<double>::constant(f), EmbeddingMode::Raw).value();
  EXPECT_EQ(e.size(), 24u);
  EXPECT_EQ(e.data, f.data);
}

TEST(Losses, MatchLoopOracles) {
  Rng rng(4);
  const auto r = check_loss_oracles(rng);
  EXPECT_TRUE(r.passed) << r.detail;
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  Rng rng(5);
  const auto r = check_loss_gradients(rng);
  EXPECT_TRUE(r.passed) << r.detail;
}
