#include "fewseg/fewseg.hpp"
#include "fewseg/testing/oracle_suite.hpp"

#include <gtest/gtest.h>

using namespace fewseg;
using namespace fewseg::testing;

namespace {

SpatialCorrelationParams<double> fixed_params() {
  SpatialCorrelationParams<double> p;
  p.channels = 2;
  p.reduced = 1;
  auto column = [](double a, double b) {
    Tensor<double> t(1, 2, 1);
    t.data = {a, b};
    return Var<double>::parameter(t);
  };
  p.theta = column(0.3, -0.2);
  p.phi = column(0.7, 0.4);
  p.g = column(-0.5, 0.9);
  Tensor<double> om(1, 1, 2);
  om.data = {1.2, -0.8};
  p.omega = Var<double>::parameter(om);
  return p;
}

Tensor<double> pixel_ids(int h, int w) {
  Tensor<double> t(h, w, 1);
  for (int i = 0; i < h * w; ++i) t.data[i] = i;
  return t;
}

std::vector<std::vector<int>> group_pixels(const std::vector<Tensor<double>>& groups) {
  std::vector<std::vector<int>> out;
  for (const auto& g : groups) {
    out.emplace_back();
    for (double v : g.data) out.back().push_back(static_cast<int>(v));
  }
  return out;
}

}  // namespace

TEST(SpatialCorrelation, FrozenSmallCase) {
  // 2x2x2 map; reference values computed independently with numpy.
  Tensor<double> f(2, 2, 2);
  f.data = {0.5, -1.0, 0.25, 2.0, -0.75, 0.5, 1.5, -0.5};
  const auto out = spatial_correlation(Var<double>::constant(f), fixed_params()).value();
  const double expected[] = {0.5898877130030751,  -1.0599251420020501, 0.26919677094477723,
                             1.9872021527034818,  -0.7308032290552228, 0.4872021527034819,
                             1.6218841058881854,  -0.5812560705921236};
  for (int i = 0; i < 8; ++i) EXPECT_NEAR(out.data[i], expected[i], 1e-14);
}

TEST(SpatialCorrelation, MatchesLoopOracleOnAllSmallShapes) {
  Rng rng(101);
  const auto r = check_correlation_oracle(rng, 3);
  EXPECT_TRUE(r.passed) << r.detail;
}

TEST(SpatialCorrelation, ZeroOmegaIsIdentity) {
  Rng rng(5);
  auto p = SpatialCorrelationParams<double>::random(4, rng);
  p.omega.mutable_value().data.assign(p.omega.value().size(), 0.0);
  const auto f = random_map(3, 5, 4, rng);
  EXPECT_EQ(spatial_correlation(Var<double>::constant(f), p).value().data, f.data);
}

TEST(SpatialCorrelation, ConstantInputGivesUniformRows) {
  Rng rng(6);
  auto p = SpatialCorrelationParams<double>::random(4, rng);
  Tensor<double> f(3, 3, 4);
  for (int i = 0; i < 9; ++i)
    for (int c = 0; c < 4; ++c) f.data[i * 4 + c] = 0.1 * (c + 1);
  const auto a = correlation_matrix(f, p);
  for (Eigen::Index r = 0; r < a.rows(); ++r)
    for (Eigen::Index c = 0; c < a.cols(); ++c) EXPECT_NEAR(a(r, c), 1.0 / 9.0, 1e-15);
}

TEST(SpatialCorrelation, RowsAreStochastic) {
  Rng rng(7);
  const auto r = check_row_stochastic(rng, 100);
  EXPECT_TRUE(r.passed) << r.detail;
}

TEST(SpatialCorrelation, OddChannelsRejected) {
  Rng rng(1);
  EXPECT_THROW(SpatialCorrelationParams<double>::random(3, rng), ConfigError);
  auto p = SpatialCorrelationParams<double>::random(4, rng);
  EXPECT_THROW(spatial_correlation(Var<double>::constant(random_map(2, 2, 2, rng)), p), ShapeError);
}

TEST(Partition, LongRangeGroupsOn4x4) {
  const auto spec = PartitionSpec::make(4, 4, 2, 2);
  const auto groups = group_pixels(long_range_rearrange(pixel_ids(4, 4), spec));
  ASSERT_EQ(groups.size(), 4u);
  EXPECT_EQ(groups[0], (std::vector<int>{0, 2, 8, 10}));
  EXPECT_EQ(groups[1], (std::vector<int>{1, 3, 9, 11}));
  EXPECT_EQ(groups[2], (std::vector<int>{4, 6, 12, 14}));
  EXPECT_EQ(groups[3], (std::vector<int>{5, 7, 13, 15}));
}

TEST(Partition, ShortRangeBlocksOn4x4) {
  const auto spec = PartitionSpec::make(4, 4, 2, 2);
  const auto groups = group_pixels(short_range_rearrange(pixel_ids(4, 4), spec));
  ASSERT_EQ(groups.size(), 4u);
  EXPECT_EQ(groups[0], (std::vector<int>{0, 1, 4, 5}));
  EXPECT_EQ(groups[1], (std::vector<int>{2, 3, 6, 7}));
  EXPECT_EQ(groups[2], (std::vector<int>{8, 9, 12, 13}));
  EXPECT_EQ(groups[3], (std::vector<int>{10, 11, 14, 15}));
}

TEST(Partition, PaddedRoundTripIsExact) {
  Rng rng(8);
  const auto f = random_map(6, 6, 3, rng);
  const auto spec = PartitionSpec::make(6, 6, 4, 4);
  EXPECT_EQ(spec.padded_h(), 8);
  EXPECT_EQ(spec.pad_h, 2);
  EXPECT_EQ(long_range_merge(long_range_rearrange(f, spec), spec).data, f.data);
  EXPECT_EQ(short_range_merge(short_range_rearrange(f, spec), spec).data, f.data);
}

TEST(Partition, CensusAndTransversality) {
  Rng rng(9);
  const auto r = check_rearrangements(rng, 200);
  EXPECT_TRUE(r.passed) << r.detail;
}

TEST(Partition, RejectsBadFactors) {
  EXPECT_THROW(PartitionSpec::make(4, 4, 0, 2), ConfigError);
  EXPECT_THROW(PartitionSpec::make(0, 4, 2, 2), ShapeError);
}

TEST(EfficientGc, ZeroWeightsReturnQuery) {
  Rng rng(10);
  auto p = EfficientGcParams<double>::random(4, 6, rng);
  for (Var<double>* t : p.tensors()) t->mutable_value().data.assign(t->value().size(), 0.0);
  const auto fq = random_map(5, 5, 4, rng), fs = random_map(5, 5, 6, rng);
  const auto out = efficient_gc(Var<double>::constant(fq), Var<double>::constant(fs), 2, 2, p).value();
  EXPECT_EQ(out.data, fq.data);
}

TEST(EfficientGc, ZeroOmegaReducesToProjectedResidual) {
  Rng rng(12);
  auto p = EfficientGcParams<double>::random(2, 4, rng);
  p.long_range.omega.mutable_value().data.assign(p.long_range.omega.value().size(), 0.0);
  p.short_range.omega.mutable_value().data.assign(p.short_range.omega.value().size(), 0.0);
  const auto fq = random_map(3, 4, 2, rng), fs = random_map(3, 4, 4, rng);
  const auto out = efficient_gc(Var<double>::constant(fq), Var<double>::constant(fs), 2, 2, p).value();
  const auto& a = p.alpha.value();  // (1, Cs + Cq, Cq), support channels first
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 4; ++x)
      for (int o = 0; o < 2; ++o) {
        double s = fq.at(y, x, o);
        for (int c = 0; c < 4; ++c) s += fs.at(y, x, c) * a.data[c * 2 + o];
        for (int c = 0; c < 2; ++c) s += fq.at(y, x, c) * a.data[(4 + c) * 2 + o];
        EXPECT_NEAR(out.at(y, x, o), s, 1e-13);
      }
}

TEST(EfficientGc, ShapeErrors) {
  Rng rng(13);
  auto p = EfficientGcParams<double>::random(4, 4, rng);
  EXPECT_THROW(efficient_gc(Var<double>::constant(random_map(4, 4, 4, rng)),
                            Var<double>::constant(random_map(4, 5, 4, rng)), 2, 2, p),
               ShapeError);
}

TEST(EfficientGc, JacobianReachability) {
  Rng rng(14);
  const auto r = check_reachability(rng);
  EXPECT_TRUE(r.passed) << r.detail;
}

TEST(EfficientGc, FlopCountBelowNaive) {
  const auto r = check_flop_dominance();
  EXPECT_TRUE(r.passed) << r.detail;
  EXPECT_EQ(spatial_correlation_flops(16, 4), 3 * 16 * 4 * 2 + 2 * 16 * 16 * 2 + 16 * 2 * 4);
}

TEST(Sse, KnownValues) {
  SseParams<double> p;
  p.weight = Var<double>::parameter(Tensor<double>(1, 2, 1));
  p.bias = Var<double>::parameter(Tensor<double>(1, 1, 1));
  Tensor<double> fq(1, 2, 2), fs(1, 2, 2);
  fq.data = {2.0, -4.0, 1.0, 3.0};
  fs.data = {5.0, 6.0, -1.0, 0.5};
  auto out = sse_attention(Var<double>::constant(fq), Var<double>::constant(fs), p).value();
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(out.data[i], fq.data[i] * 0.5);
  p.weight.mutable_value().data = {1.0, 0.0};
  out = sse_attention(Var<double>::constant(fq), Var<double>::constant(fs), p).value();
  EXPECT_NEAR(out.data[0], 2.0 / (1.0 + std::exp(-5.0)), 1e-15);
  EXPECT_NEAR(out.data[3], 3.0 / (1.0 + std::exp(1.0)), 1e-15);
}

TEST(Sse, MatchesLoopOracle) {
  Rng rng(15);
  const auto r = check_sse_oracle(rng, 30);
  EXPECT_TRUE(r.passed) << r.detail;
}

TEST(CorrelationGradients, AllModules) {
  Rng rng(16);
  const auto r = check_correlation_gradients(rng);
  EXPECT_TRUE(r.passed) << r.detail;
}
