#include <cmath>

#include "doctest.h"
#include "dpnet/autodiff.hpp"
#include "dpnet/ops.hpp"

using namespace dpnet;

namespace {

Tensor leaf(const Shape& s, std::vector<double> v) {
  Tensor t = Tensor::from_values(s, std::move(v));
  t.set_requires_grad(true);
  return t;
}

}  // namespace

TEST_CASE("sum of squares gradient is 2x") {
  Tape::active().reset();
  Tensor a = leaf({3}, {1, 2, 3});
  Tensor loss = reduce_sum(mul(a, a));
  CHECK(loss.item() == 14.0);
  auto g = grad(loss, {a});
  CHECK(g[0].values() == std::vector<double>{2, 4, 6});
}

TEST_CASE("backward deposits into leaf grad buffers and accumulates") {
  Tape::active().reset();
  Tensor a = leaf({2}, {3, -1});
  backward(reduce_sum(mul(a, a)));
  CHECK(a.grad() == std::vector<double>{6, -2});
  Tape::active().reset();
  backward(reduce_sum(a));
  CHECK(a.grad() == std::vector<double>{7, -1});  // accumulated on top
  a.zero_grad();
}

TEST_CASE("sigmoid gradient at zero is a quarter") {
  Tape::active().reset();
  Tensor x = leaf({1}, {0.0});
  auto g = grad(reduce_sum(sigmoid(x)), {x});
  CHECK(g[0].item() == doctest::Approx(0.25).epsilon(1e-14));
  Tape::active().reset();
  Tensor y = leaf({1}, {0.5});
  CHECK(sigmoid(y).item() == doctest::Approx(0.6224593312018546).epsilon(1e-15));
  auto g2 = grad(reduce_sum(sigmoid(y)), {y});
  CHECK(g2[0].item() == doctest::Approx(0.2350037122015945).epsilon(1e-14));
}

TEST_CASE("mean gradient is one over n") {
  Tape::active().reset();
  Tensor x = leaf({4}, {1, 2, 3, 4});
  auto g = grad(reduce_mean(x), {x});
  for (double v : g[0].values()) CHECK(v == 0.25);
}

TEST_CASE("difference of squares routes signs correctly") {
  Tape::active().reset();
  Tensor a = leaf({2}, {3, 5});
  Tensor b = leaf({2}, {1, 2});
  Tensor d = sub(a, b);
  auto g = grad(reduce_sum(mul(d, d)), {a, b});
  CHECK(g[0].values() == std::vector<double>{4, 6});
  CHECK(g[1].values() == std::vector<double>{-4, -6});
}

TEST_CASE("division gradients") {
  Tape::active().reset();
  Tensor a = leaf({2}, {1, 2});
  Tensor b = leaf({2}, {2, 4});
  auto g = grad(reduce_sum(div(a, b)), {a, b});
  CHECK(g[0].values() == std::vector<double>{0.5, 0.25});
  CHECK(g[1].values() == std::vector<double>{-0.25, -0.125});
  CHECK_THROWS_AS(div(a, Tensor::zeros({2})), NumericError);
}

TEST_CASE("broadcast rhs reduces back to its own shape") {
  Tape::active().reset();
  Tensor a = leaf({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = leaf({1, 3}, {10, 20, 30});
  auto g = grad(reduce_sum(mul(a, b)), {a, b});
  CHECK(g[0].values() == std::vector<double>{10, 20, 30, 10, 20, 30});
  CHECK(g[1].values() == std::vector<double>{5, 7, 9});  // column sums of a
  CHECK_THROWS_AS(add(a, Tensor::zeros({2, 2})), ShapeError);
  CHECK_THROWS_AS(add(a, Tensor::zeros({3})), ShapeError);
}

TEST_CASE("relu uses subgradient zero at the kink") {
  Tape::active().reset();
  Tensor x = leaf({4}, {-2, 0, 1e-12, 3});
  Tensor y = relu(x);
  CHECK(y.values() == std::vector<double>{0, 0, 1e-12, 3});
  auto g = grad(reduce_sum(y), {x});
  CHECK(g[0].values() == std::vector<double>{0, 0, 1, 1});
}

TEST_CASE("abs and clamp mask gradients") {
  Tape::active().reset();
  Tensor x = leaf({4}, {-2, -0.5, 0.5, 2});
  auto ga = grad(reduce_sum(abs(x)), {x});
  CHECK(ga[0].values() == std::vector<double>{-1, -1, 1, 1});
  Tape::active().reset();
  Tensor c = clamp(x, -1.0, 1.0);
  CHECK(c.values() == std::vector<double>{-1, -0.5, 0.5, 1});
  auto gc = grad(reduce_sum(c), {x});
  CHECK(gc[0].values() == std::vector<double>{0, 1, 1, 0});
}

TEST_CASE("log exp sqrt pow gradients at pinned points") {
  Tape::active().reset();
  Tensor x = leaf({2}, {1.0, 4.0});
  auto gl = grad(reduce_sum(log(x)), {x});
  CHECK(gl[0].values()[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(gl[0].values()[1] == doctest::Approx(0.25).epsilon(1e-15));
  Tape::active().reset();
  auto gs = grad(reduce_sum(sqrt(x)), {x});
  CHECK(gs[0].values()[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(gs[0].values()[1] == doctest::Approx(0.25).epsilon(1e-15));
  Tape::active().reset();
  auto gp = grad(reduce_sum(pow_scalar(x, 3.0)), {x});
  CHECK(gp[0].values()[0] == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(gp[0].values()[1] == doctest::Approx(48.0).epsilon(1e-15));
  CHECK_THROWS_AS(log(Tensor::from_values({1}, {0.0})), NumericError);
  CHECK_THROWS_AS(sqrt(Tensor::from_values({1}, {-1.0})), NumericError);
  CHECK_THROWS_AS(pow_scalar(Tensor::from_values({1}, {-1.0}), 0.5), NumericError);
}

TEST_CASE("reshape permute slice embed concat are exact linear maps") {
  Tape::active().reset();
  Tensor x = leaf({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor xt = permute(x, {1, 0});
  CHECK(xt.shape() == Shape{3, 2});
  CHECK(xt.values() == std::vector<double>{1, 4, 2, 5, 3, 6});
  Tensor m = Tensor::from_values({3, 2}, {1, 0, 0, 1, 2, 2});
  auto g = grad(reduce_sum(mul(xt, m)), {x});
  CHECK(g[0].values() == std::vector<double>{1, 0, 2, 0, 1, 2});

  Tape::active().reset();
  Tensor r = reshape(x, {6});
  Tensor s = slice0(r, 2, 3);  // elements 3,4,5
  CHECK(s.values() == std::vector<double>{3, 4, 5});
  auto gs = grad(reduce_sum(s), {x});
  CHECK(gs[0].values() == std::vector<double>{0, 0, 1, 1, 1, 0});

  Tape::active().reset();
  Tensor a = leaf({2, 2}, {1, 2, 3, 4});
  Tensor b = leaf({1, 2}, {5, 6});
  Tensor cat = concat0({a, b});
  CHECK(cat.shape() == Shape{3, 2});
  CHECK(cat.values() == std::vector<double>{1, 2, 3, 4, 5, 6});
  Tensor w = Tensor::from_values({3, 2}, {1, 1, 2, 2, 3, 3});
  auto gc = grad(reduce_sum(mul(cat, w)), {a, b});
  CHECK(gc[0].values() == std::vector<double>{1, 1, 2, 2});
  CHECK(gc[1].values() == std::vector<double>{3, 3});

  Tape::active().reset();
  Tensor e = embed0(b, 1, 3);
  CHECK(e.values() == std::vector<double>{0, 0, 5, 6, 0, 0});
  CHECK_THROWS_AS(reshape(x, {5}), ShapeError);
  CHECK_THROWS_AS(permute(x, {0, 0}), ShapeError);
  CHECK_THROWS_AS(slice0(x, 1, 2), ShapeError);
}

TEST_CASE("reduce_sum over axes with keepdim") {
  Tape::active().reset();
  Tensor x = leaf({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor s0 = reduce_sum(x, {0}, false);
  CHECK(s0.shape() == Shape{3});
  CHECK(s0.values() == std::vector<double>{5, 7, 9});
  Tensor s1 = reduce_sum(x, {1}, true);
  CHECK(s1.shape() == Shape{2, 1});
  CHECK(s1.values() == std::vector<double>{6, 15});
  auto g = grad(reduce_sum(mul(s1, Tensor::from_values({2, 1}, {2, 3}))), {x});
  CHECK(g[0].values() == std::vector<double>{2, 2, 2, 3, 3, 3});
  CHECK_THROWS_AS(reduce_sum(x, {1, 0}, false), ShapeError);
  CHECK_THROWS_AS(reduce_sum(x, {2}, false), ShapeError);
}

TEST_CASE("upsample and block pooling are transposes of each other") {
  Tape::active().reset();
  Tensor x = leaf({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor up = upsample_nearest(x, 2);
  CHECK(up.shape() == Shape{1, 1, 4, 4});
  CHECK(up.values() == std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
  auto g = grad(reduce_sum(up), {x});
  CHECK(g[0].values() == std::vector<double>{4, 4, 4, 4});

  Tape::active().reset();
  Tensor bs = block_sum(up.detach().set_requires_grad(true), 2);
  CHECK(bs.values() == std::vector<double>{4, 8, 12, 16});
  CHECK_THROWS_AS(block_sum(Tensor::zeros({1, 1, 3, 3}), 2), ShapeError);
}

TEST_CASE("conv2d matches hand-computed 3x3 all-ones case") {
  Tape::active().reset();
  Tensor x = leaf({1, 1, 3, 3}, std::vector<double>(9, 1.0));
  Tensor w = leaf({1, 1, 3, 3}, std::vector<double>(9, 1.0));
  Tensor b = leaf({1}, {0.0});
  Tensor y = conv2d(x, w, b, 1, 1);
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  CHECK(y.values() == std::vector<double>{4, 6, 4, 6, 9, 6, 4, 6, 4});
  auto g = grad(reduce_sum(y), {x, w, b});
  CHECK(g[0].values() == std::vector<double>{4, 6, 4, 6, 9, 6, 4, 6, 4});
  CHECK(g[1].values() == std::vector<double>{4, 6, 4, 6, 9, 6, 4, 6, 4});
  CHECK(g[2].values() == std::vector<double>{9});
}

TEST_CASE("conv2d identity kernel and stride two block sums") {
  Tape::active().reset();
  Tensor x = Tensor::from_values({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor w1 = Tensor::from_values({1, 1, 1, 1}, {1.0});
  Tensor y = conv2d(x, w1, Tensor(), 1, 0);
  CHECK(y.values() == x.values());

  std::vector<double> xv(16);
  for (int i = 0; i < 16; ++i) xv[i] = i + 1;
  Tensor x2 = Tensor::from_values({1, 1, 4, 4}, xv);
  Tensor w2 = Tensor::from_values({1, 1, 2, 2}, {1, 1, 1, 1});
  Tensor y2 = conv2d(x2, w2, Tensor(), 2, 0);
  CHECK(y2.shape() == Shape{1, 1, 2, 2});
  CHECK(y2.values() == std::vector<double>{14, 22, 46, 54});

  CHECK_THROWS_AS(conv2d(x, Tensor::zeros({1, 2, 1, 1}), Tensor(), 1, 0), ShapeError);
  CHECK_THROWS_AS(conv2d(x, w1, Tensor::zeros({2}), 1, 0), ShapeError);
}

TEST_CASE("multichannel conv cross-correlates per output channel") {
  Tape::active().reset();
  // x: 2 channels; w: 2 out channels, each selecting one input channel.
  Tensor x = Tensor::from_values({1, 2, 2, 2}, {1, 2, 3, 4, 10, 20, 30, 40});
  Tensor w = Tensor::from_values({2, 2, 1, 1}, {1, 0, 0, 1});
  Tensor y = conv2d(x, w, Tensor(), 1, 0);
  CHECK(y.values() == std::vector<double>{1, 2, 3, 4, 10, 20, 30, 40});
  Tensor wmix = Tensor::from_values({1, 2, 1, 1}, {2, 0.5});
  Tensor ym = conv2d(x, wmix, Tensor(), 1, 0);
  CHECK(ym.values() == std::vector<double>{7, 14, 21, 28});
}

TEST_CASE("batchnorm train normalizes and updates running stats") {
  Tape::active().reset();
  Tensor x = leaf({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor gamma = leaf({1}, {1.0});
  Tensor beta = leaf({1}, {0.0});
  Tensor rm = Tensor::zeros({1});
  Tensor rv = Tensor::full({1}, 1.0);
  Tensor y = batchnorm2d(x, gamma, beta, rm, rv, BnMode::Train);
  CHECK(y.values()[0] == doctest::Approx(-1.3416354199689269).epsilon(1e-14));
  CHECK(y.values()[1] == doctest::Approx(-0.447211806656309).epsilon(1e-14));
  CHECK(y.values()[2] == doctest::Approx(0.447211806656309).epsilon(1e-14));
  CHECK(y.values()[3] == doctest::Approx(1.3416354199689269).epsilon(1e-14));
  CHECK(rm.values()[0] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(rv.values()[0] == doctest::Approx(1.0666666666666667).epsilon(1e-14));

  // TrainNoUpdate normalizes identically but leaves the buffers alone.
  Tensor rm2 = Tensor::zeros({1});
  Tensor rv2 = Tensor::full({1}, 1.0);
  Tensor y2 = batchnorm2d(x, gamma, beta, rm2, rv2, BnMode::TrainNoUpdate);
  CHECK(y2.values() == y.values());
  CHECK(rm2.values()[0] == 0.0);
  CHECK(rv2.values()[0] == 1.0);
}

TEST_CASE("batchnorm eval uses the running buffers") {
  Tape::active().reset();
  Tensor x = Tensor::full({1, 1, 1, 1}, 1.0);
  Tensor gamma = Tensor::full({1}, 2.0);
  Tensor beta = Tensor::full({1}, 1.0);
  Tensor rm = Tensor::zeros({1});
  Tensor rv = Tensor::full({1}, 1.0);
  Tensor y = batchnorm2d(x, gamma, beta, rm, rv, BnMode::Eval);
  CHECK(y.item() == doctest::Approx(2.9999900000749995).epsilon(1e-15));
  // Train mode on a single-pixel batch has no spread to normalize by.
  CHECK_THROWS_AS(batchnorm2d(x, gamma, beta, rm, rv, BnMode::Train), NumericError);
}

TEST_CASE("gradients flow to batchnorm scale and shift") {
  Tape::active().reset();
  Tensor x = leaf({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor gamma = leaf({1}, {1.5});
  Tensor beta = leaf({1}, {0.25});
  Tensor rm = Tensor::zeros({1});
  Tensor rv = Tensor::full({1}, 1.0);
  Tensor y = batchnorm2d(x, gamma, beta, rm, rv, BnMode::TrainNoUpdate);
  auto g = grad(reduce_sum(y), {gamma, beta, x});
  // Normalized values sum to zero, so d/dgamma of sum is 0 and d/dbeta is n.
  CHECK(g[0].item() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(g[1].item() == doctest::Approx(4.0).epsilon(1e-15));
  double xsum = 0.0;
  for (double v : g[2].values()) xsum += v;
  CHECK(xsum == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("grad returns zeros for unreachable inputs") {
  Tape::active().reset();
  Tensor a = leaf({2}, {1, 2});
  Tensor b = leaf({2}, {3, 4});
  auto g = grad(reduce_sum(mul(a, a)), {a, b});
  CHECK(g[1].values() == std::vector<double>{0, 0});
}

TEST_CASE("detached values act as constants") {
  Tape::active().reset();
  Tensor x = leaf({1}, {3.0});
  Tensor y = mul(x, x.detach());
  auto g = grad(reduce_sum(y), {x});
  CHECK(g[0].item() == 3.0);  // not 6: the detached factor is constant
}

TEST_CASE("backward on a tensor outside the graph is an error") {
  Tape::active().reset();
  Tensor c = Tensor::scalar(1.0);
  CHECK_THROWS_AS(backward(c), UsageError);
  Tensor a = leaf({2}, {1, 2});
  CHECK_THROWS_AS(backward(mul(a, a)), ShapeError);  // non-scalar loss
}

TEST_CASE("diamond reuse accumulates both paths") {
  Tape::active().reset();
  Tensor x = leaf({1}, {2.0});
  Tensor y = mul(x, x);           // 4
  Tensor z = add(y, mul_scalar(x, 3.0));  // x^2 + 3x
  auto g = grad(reduce_sum(z), {x});
  CHECK(g[0].item() == 7.0);  // 2x + 3
}

TEST_CASE("second backward through a recorded gradient is exact") {
  // f = sum(x^3); first grad 3x^2; directional second grad 6 x v.
  Tape::active().reset();
  Tensor x = leaf({2}, {1.0, 2.0});
  Tensor f = reduce_sum(pow_scalar(x, 3.0));
  auto g1 = grad(f, {x}, true);
  Tensor v = Tensor::from_values({2}, {1.0, 10.0});
  Tensor s = reduce_sum(mul(g1[0], v));
  auto g2 = grad(s, {x});
  CHECK(g2[0].values()[0] == doctest::Approx(6.0).epsilon(1e-13));
  CHECK(g2[0].values()[1] == doctest::Approx(120.0).epsilon(1e-13));
}

TEST_CASE("second backward through a convolution is exact") {
  // f = sum((conv(x, w))^2): dw = conv_weight_grad(x, 2 conv(x,w));
  // differentiating sum(dw * v) w.r.t. w again uses the kernel trio.
  Tape::active().reset();
  Tensor x = Tensor::from_values({1, 1, 3, 3}, {1, -1, 2, 0, 3, 1, -2, 1, 4});
  Tensor w = leaf({1, 1, 2, 2}, {0.5, -0.25, 1.0, 0.75});
  Tensor y = conv2d(x, w, Tensor(), 1, 0);
  Tensor f = reduce_sum(mul(y, y));
  auto g1 = grad(f, {w}, true);
  Tensor v = Tensor::from_values({1, 1, 2, 2}, {1, 2, -1, 0.5});
  auto g2 = grad(reduce_sum(mul(g1[0], v)), {w});
  // d2f/dw2 contracted with v equals 2 * conv_weight_grad(x, conv(x, v)).
  Tensor yv = conv2d(x, v, Tensor(), 1, 0);
  Tensor expect = conv2d_weight_grad(x, mul_scalar(yv, 2.0), 1, 0, 2, 2);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(g2[0].values()[i] == doctest::Approx(expect.values()[i]).epsilon(1e-12));
}

TEST_CASE("tape reset invalidates prior graph tensors") {
  Tape::active().reset();
  Tensor a = leaf({1}, {2.0});
  Tensor y = mul(a, a);
  Tape::active().reset();
  CHECK_THROWS_AS(backward(y), UsageError);
}
