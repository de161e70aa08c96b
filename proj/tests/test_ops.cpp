#include <gtest/gtest.h>

#include "diffx/module.hpp"
#include "gradcheck.hpp"

using namespace diffx;
using diffx::testing::grad_check;

namespace {

Var<double> rand_param(Rng& rng, Shape s) { return parameter(rng.normal_tensor<double>(s)); }

// Weighted sum so every output element gets a distinct upstream gradient.
Var<double> probe(const Var<double>& y, uint64_t seed = 99) {
  Rng r(seed);
  return ops::sum(ops::mul(y, constant(r.normal_tensor<double>(y.shape()))));
}

}  // namespace

TEST(Ops, ElementwiseGradients) {
  Rng rng(1);
  auto a = rand_param(rng, {2, 3});
  auto b = rand_param(rng, {2, 3});
  auto s = rand_param(rng, {1});
  NamedParams<double> ps{{"a", a}, {"b", b}, {"s", s}};
  auto res = grad_check(ps, [&] {
    auto y = ops::add(ops::mul(ops::tanh(a), ops::silu(b)), ops::sub(ops::gelu(a), ops::exp(ops::scale(b, 0.3))));
    y = ops::mul_scalar(ops::add_scalar(ops::square(y), 0.5), s);
    return probe(y);
  });
  EXPECT_LT(res.max_rel_err, 1e-7) << res.worst;
}

TEST(Ops, StructuralGradients) {
  Rng rng(2);
  auto a = rand_param(rng, {2, 3, 4});
  auto b = rand_param(rng, {2, 2, 4});
  auto pos = rand_param(rng, {5, 4});
  auto table = rand_param(rng, {6, 4});
  NamedParams<double> ps{{"a", a}, {"b", b}, {"pos", pos}, {"table", table}};
  auto res = grad_check(ps, [&] {
    auto c = ops::concat<double>({a, b}, 1);               // (2,5,4)
    auto d = ops::add_broadcast(c, pos);                   // (2,5,4)
    auto e = ops::slice(d, 1, 1, 4);                       // (2,3,4)
    auto f = ops::merge_heads(ops::split_heads(e, 2), 2);  // identity layout round trip
    auto g = ops::permute(f, {2, 0, 1});
    auto rows = ops::gather_rows(table, {0, 3, 3, 5});
    auto sb = ops::scale_batch(f, {1.0, 0.0});
    return ops::add(ops::add(probe(g), probe(rows, 5)), probe(sb, 6));
  });
  EXPECT_LT(res.max_rel_err, 1e-7) << res.worst;
}

TEST(Ops, PermuteMatchesIndexing) {
  Rng rng(3);
  Tensor<double> x = rng.normal_tensor<double>({2, 3, 4, 5});
  auto y = ops::permute(constant(x), {0, 2, 3, 1}).value();
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int h = 0; h < 4; ++h)
        for (int w = 0; w < 5; ++w) EXPECT_EQ(y.at({n, h, w, c}), x.at({n, c, h, w}));
}

TEST(Ops, LinearAndBmmGradients) {
  Rng rng(4);
  auto x = rand_param(rng, {2, 3, 5});
  auto W = rand_param(rng, {4, 5});
  auto b = rand_param(rng, {4});
  auto m = rand_param(rng, {2, 4, 3});
  NamedParams<double> ps{{"x", x}, {"W", W}, {"b", b}, {"m", m}};
  auto res = grad_check(ps, [&] { return probe(ops::bmm(ops::linear(x, W, b), m)); });
  EXPECT_LT(res.max_rel_err, 1e-7) << res.worst;
}

TEST(Ops, ConvGradients) {
  Rng rng(5);
  auto x = rand_param(rng, {2, 3, 6, 6});
  auto W3 = rand_param(rng, {4, 3, 3, 3});
  auto b3 = rand_param(rng, {4});
  auto Ws = rand_param(rng, {2, 4, 3, 3});
  auto W1 = rand_param(rng, {3, 2, 1, 1});
  auto b1 = rand_param(rng, {3});
  NamedParams<double> ps{{"x", x}, {"W3", W3}, {"b3", b3}, {"Ws", Ws}, {"W1", W1}, {"b1", b1}};
  auto res = grad_check(ps, [&] {
    auto y = ops::conv2d(x, W3, b3, 1, 1);
    y = ops::conv2d(y, Ws, Var<double>(), 2, 1);  // (2,2,3,3)
    y = ops::conv2d(ops::upsample_nearest2x(y), W1, b1, 1, 0);
    return probe(y);
  });
  EXPECT_LT(res.max_rel_err, 1e-7) << res.worst;
}

TEST(Ops, ConvMatchesDirectLoop) {
  Rng rng(6);
  auto x = rng.normal_tensor<double>({1, 2, 5, 5});
  auto W = rng.normal_tensor<double>({3, 2, 3, 3});
  auto y = ops::conv2d(constant(x), constant(W), Var<double>(), 2, 1).value();
  ASSERT_EQ(y.shape(), (Shape{1, 3, 3, 3}));
  for (int o = 0; o < 3; ++o)
    for (int oy = 0; oy < 3; ++oy)
      for (int ox = 0; ox < 3; ++ox) {
        double acc = 0;
        for (int c = 0; c < 2; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              int iy = oy * 2 - 1 + ky, ix = ox * 2 - 1 + kx;
              if (iy >= 0 && iy < 5 && ix >= 0 && ix < 5) acc += W.at({o, c, ky, kx}) * x.at({0, c, iy, ix});
            }
        EXPECT_NEAR(y.at({0, o, oy, ox}), acc, 1e-12);
      }
}

TEST(Ops, NormGradients) {
  Rng rng(7);
  auto x = rand_param(rng, {2, 4, 3, 3});
  auto g = rand_param(rng, {4});
  auto b = rand_param(rng, {4});
  auto t = rand_param(rng, {3, 5});
  auto lg = rand_param(rng, {5});
  auto lb = rand_param(rng, {5});
  auto v = rand_param(rng, {2, 4});
  NamedParams<double> ps{{"x", x}, {"g", g}, {"b", b}, {"t", t}, {"lg", lg}, {"lb", lb}, {"v", v}};
  auto res = grad_check(ps, [&] {
    return ops::add(probe(ops::group_norm(ops::add_channel(x, v), g, b, 2)), probe(ops::layer_norm(t, lg, lb), 3));
  });
  EXPECT_LT(res.max_rel_err, 1e-6) << res.worst;
}

TEST(Ops, AttentionGradientsWithKeyMask) {
  Rng rng(8);
  auto q = rand_param(rng, {2, 3, 4});
  auto k = rand_param(rng, {2, 5, 4});
  auto v = rand_param(rng, {2, 5, 6});
  NamedParams<double> ps{{"q", q}, {"k", k}, {"v", v}};
  auto res = grad_check(ps, [&] { return probe(ops::attention(q, k, v, {5, 2})); });
  EXPECT_LT(res.max_rel_err, 1e-7) << res.worst;
  // Masked keys receive no gradient and do not affect the output.
  for (auto p : {k, v}) p.zero_grad();
  probe(ops::attention(q, k, v, {5, 2})).backward();
  auto gk = k.grad();
  for (int j = 2; j < 5; ++j)
    for (int c = 0; c < 4; ++c) EXPECT_EQ(gk.at({1, j, c}), 0.0);
}

TEST(Ops, AttentionRowsAreStochastic) {
  Rng rng(9);
  auto q = rng.normal_tensor<double>({3, 4, 8});
  auto k = rng.normal_tensor<double>({3, 7, 8});
  auto P = ops::attention_weights(q, k);
  for (int b = 0; b < 3; ++b)
    for (int i = 0; i < 4; ++i) {
      double s = 0;
      for (int j = 0; j < 7; ++j) s += P.at({b, i, j});
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Ops, ShapeErrors) {
  auto a = constant(Tensor<double>({2, 3}));
  auto b = constant(Tensor<double>({3, 2}));
  EXPECT_THROW(ops::add(a, b), ShapeError);
  EXPECT_THROW(ops::slice(a, 1, 2, 5), ShapeError);
  EXPECT_THROW(Var<double>(Tensor<double>({2})).backward(), ShapeError);
}
