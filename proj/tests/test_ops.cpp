#include "fewseg/fewseg.hpp"
#include "fewseg/testing/oracles.hpp"

#include <gtest/gtest.h>

using namespace fewseg;
using namespace fewseg::testing;

namespace {

// "Same" convolution with zero padding, written as nested loops.
Tensor<double> loop_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                         int k) {
  const int cout = w.c, pad = k / 2;
  Tensor<double> out(x.h, x.w, cout);
  for (int y = 0; y < x.h; ++y)
    for (int xx = 0; xx < x.w; ++xx)
      for (int co = 0; co < cout; ++co) {
        double s = b.size() ? b.data[co] : 0.0;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            const int sy = y + ky - pad, sx = xx + kx - pad;
            if (sy < 0 || sy >= x.h || sx < 0 || sx >= x.w) continue;
            for (int ci = 0; ci < x.c; ++ci)
              s += x.at(sy, sx, ci) * w.data[((ky * k + kx) * x.c + ci) * cout + co];
          }
        out.at(y, xx, co) = s;
      }
  return out;
}

double grad_error(const std::function<Var<double>()>& f,
                  const std::vector<std::pair<std::string, Var<double>*>>& wrt, Rng& rng) {
  const auto r = check_gradients(f, wrt, rng);
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
  return r.max_rel_error;
}

}  // namespace

TEST(Conv2d, MatchesLoopConvolution) {
  Rng rng(11);
  for (int k : {1, 3}) {
    const auto x = random_map(5, 7, 3, rng);
    const auto w = random_map(k * k, 3, 4, rng);
    const auto b = random_map(1, 1, 4, rng);
    const auto fast =
        ops::conv2d(Var<double>::constant(x), Var<double>::constant(w), Var<double>::constant(b), k)
            .value();
    const auto slow = loop_conv(x, w, b, k);
    for (std::size_t i = 0; i < fast.size(); ++i) EXPECT_NEAR(fast.data[i], slow.data[i], 1e-12);
  }
}

TEST(Conv2d, RejectsChannelMismatch) {
  Rng rng(1);
  auto x = Var<double>::constant(random_map(4, 4, 3, rng));
  auto w = Var<double>::constant(random_map(9, 2, 4, rng));
  EXPECT_THROW(ops::conv2d(x, w, Var<double>(), 3), ShapeError);
}

TEST(OpsGradients, Conv2d) {
  Rng rng(2);
  auto x = Var<double>::parameter(random_map(5, 4, 3, rng));
  auto w3 = Var<double>::parameter(random_map(9, 3, 2, rng));
  auto w1 = Var<double>::parameter(random_map(1, 3, 2, rng));
  auto b = Var<double>::parameter(random_map(1, 1, 2, rng));
  const auto r = random_map(5, 4, 2, rng);
  grad_error([&] { return readout(ops::conv2d(x, w3, b, 3), r); }, {{"x", &x}, {"w", &w3}, {"b", &b}}, rng);
  grad_error([&] { return readout(ops::conv2d(x, w1, b, 1), r); }, {{"x", &x}, {"w", &w1}, {"b", &b}}, rng);
}

TEST(OpsGradients, Pointwise) {
  Rng rng(3);
  auto x = Var<double>::parameter(random_map(4, 4, 3, rng));
  auto y = Var<double>::parameter(random_map(4, 4, 3, rng));
  auto s = Var<double>::parameter(random_map(4, 4, 1, rng));
  const auto r = random_map(4, 4, 3, rng);
  const auto r6 = random_map(4, 4, 6, rng);
  grad_error([&] { return readout(ops::relu(x), r); }, {{"x", &x}}, rng);
  grad_error([&] { return readout(ops::sigmoid(x), r); }, {{"x", &x}}, rng);
  grad_error([&] { return readout(ops::add(x, y), r); }, {{"x", &x}, {"y", &y}}, rng);
  grad_error([&] { return readout(ops::scale(x, 0.3), r); }, {{"x", &x}}, rng);
  grad_error([&] { return readout(ops::concat_channels(x, y), r6); }, {{"x", &x}, {"y", &y}}, rng);
  grad_error([&] { return readout(ops::scale_by_map(x, s), r); }, {{"x", &x}, {"s", &s}}, rng);
}

TEST(OpsGradients, Resampling) {
  Rng rng(4);
  auto x = Var<double>::parameter(random_map(4, 6, 2, rng));
  const auto r_down = random_map(2, 3, 2, rng);
  const auto r_up = random_map(8, 12, 2, rng);
  grad_error([&] { return readout(ops::max_pool2(x), r_down); }, {{"x", &x}}, rng);
  grad_error([&] { return readout(ops::upsample2(x), r_up); }, {{"x", &x}}, rng);
  auto table = std::make_shared<const std::vector<int>>(std::vector<int>{3, -1, 0, 0, 23, 7});
  const auto r_g = random_map(2, 3, 2, rng);
  grad_error([&] { return readout(ops::gather_pixels(x, table, 2, 3), r_g); }, {{"x", &x}}, rng);
}

TEST(Ops, MaxPoolAndUpsampleValues) {
  Tensor<double> t(2, 2, 1);
  t.data = {1, 4, 3, 2};
  EXPECT_EQ(ops::max_pool2(Var<double>::constant(t)).value().data[0], 4.0);
  const auto up = ops::upsample2(Var<double>::constant(t)).value();
  EXPECT_EQ(up.h, 4);
  EXPECT_EQ(up.at(0, 1, 0), 1.0);
  EXPECT_EQ(up.at(3, 3, 0), 2.0);
  Tensor<double> odd(3, 2, 1);
  EXPECT_THROW(ops::max_pool2(Var<double>::constant(odd)), ShapeError);
}

TEST(Autograd, SharedSubexpressionAccumulates) {
  Tensor<double> v(1, 1, 1, 2.0);
  auto x = Var<double>::parameter(v);
  auto y = ops::add(x, x);  // 2x
  auto z = ops::add(y, ops::scale(y, 3.0));  // 8x
  backward(z);
  EXPECT_DOUBLE_EQ(x.grad().data[0], 8.0);
  backward(z);
  EXPECT_DOUBLE_EQ(x.grad().data[0], 16.0);
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Autograd, NoGradGuardSkipsRecording) {
  auto x = Var<double>::parameter(Tensor<double>(1, 1, 1, 1.0));
  {
    NoGradGuard g;
    EXPECT_FALSE(ops::relu(x).requires_grad());
  }
  EXPECT_TRUE(ops::relu(x).requires_grad());
}

TEST(Autograd, BackwardNeedsScalar) {
  auto x = Var<double>::parameter(Tensor<double>(2, 1, 1, 1.0));
  EXPECT_THROW(backward(ops::relu(x)), ShapeError);
}
